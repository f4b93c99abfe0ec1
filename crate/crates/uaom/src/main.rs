fn main() {
    std::process::exit(uaom::cli::main_with_args(std::env::args_os()));
}
