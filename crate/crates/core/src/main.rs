fn main() {
    std::process::exit(tapflow::cli::run(std::env::args_os()));
}
