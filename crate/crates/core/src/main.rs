fn main() {
    std::process::exit(transport_mi::cli::run(std::env::args_os()));
}
