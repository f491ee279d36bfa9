fn main() {
    std::process::exit(mfeq::cli::run(std::env::args_os()));
}
