fn main() { std::process::exit(nmsa_cli::run(std::env::args_os())); }
