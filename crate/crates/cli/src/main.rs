fn main() {
    std::process::exit(sigvae_cli::run(std::env::args_os()));
}
