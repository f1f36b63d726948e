fn main() {
    std::process::exit(vidctl_cli::run(std::env::args_os()));
}
