fn main() {
    std::process::exit(dynpet::cli::run(std::env::args_os()));
}
