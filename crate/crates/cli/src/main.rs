fn main() {
    std::process::exit(lccmkit_cli::run(std::env::args_os()));
}
