fn main() {
    std::process::exit(coldspray::cli::run(std::env::args_os()));
}
