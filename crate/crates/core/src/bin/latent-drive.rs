fn main() {
    std::process::exit(latent_drive::cli::main_with_args(std::env::args_os()));
}
