fn main() {
    std::process::exit(pegp_vae::cli::run(std::env::args_os()));
}
