fn main() {
    std::process::exit(latte_cli::run(std::env::args_os()));
}
