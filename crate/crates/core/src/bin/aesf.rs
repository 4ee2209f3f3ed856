fn main() {
    std::process::exit(aesf::cli::run(std::env::args_os()));
}
