fn main() {
    echoloop::cli::init_logging();
    std::process::exit(echoloop::cli::run(std::env::args_os()));
}
