fn main() {
    std::process::exit(xlent::cli::run(std::env::args_os()));
}
