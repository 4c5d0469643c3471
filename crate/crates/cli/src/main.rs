fn main() {
    std::process::exit(capinv_cli::cli_main(std::env::args_os()));
}
