fn main() {
    std::process::exit(contrastcam::cli::run(std::env::args_os()));
}
