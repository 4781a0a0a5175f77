fn main() {
    std::process::exit(endonet::cli::run(std::env::args_os()));
}
