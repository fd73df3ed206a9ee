fn main() {
    std::process::exit(bvae::cli::run(std::env::args_os()));
}
