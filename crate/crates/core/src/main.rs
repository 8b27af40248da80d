fn main() {
    std::process::exit(gnncg::cli::main_with_args(std::env::args_os()));
}
