fn main() {
    std::process::exit(themeforge_cli::main_with_args(std::env::args().skip(1).collect()));
}
