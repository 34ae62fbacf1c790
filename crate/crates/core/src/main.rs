fn main() {
    std::process::exit(xfund::cli::main_with(std::env::args_os()));
}
