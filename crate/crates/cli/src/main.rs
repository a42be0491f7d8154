fn main() {
    std::process::exit(knav_cli::run_from(std::env::args_os()));
}
