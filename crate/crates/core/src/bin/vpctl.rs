fn main() {
    std::process::exit(vlasov_control::cli::run(std::env::args_os()));
}
