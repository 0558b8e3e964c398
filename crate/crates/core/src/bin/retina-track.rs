fn main() {
    std::process::exit(retina_track::cli::main_with_args(std::env::args_os()));
}
