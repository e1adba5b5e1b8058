fn main() {
    std::process::exit(groupreg::cli::run(std::env::args_os()));
}
