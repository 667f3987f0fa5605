fn main() {
    std::process::exit(soup::cli::parse_and_dispatch(std::env::args_os()));
}
