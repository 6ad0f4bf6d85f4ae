fn main() {
    std::process::exit(protospsa::cli::cli_main(std::env::args_os()));
}
