fn main() {
    std::process::exit(tckit::cli::run(std::env::args_os()));
}
