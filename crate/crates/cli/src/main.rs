fn main() {
    std::process::exit(vidguide_cli::cli_main(std::env::args_os()));
}
