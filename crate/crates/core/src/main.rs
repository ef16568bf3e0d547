fn main() {
    std::process::exit(ordergate::cli::execute(std::env::args_os()));
}
