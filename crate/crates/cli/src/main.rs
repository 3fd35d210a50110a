fn main() {
    std::process::exit(pato_cli::run(std::env::args_os()));
}
