fn main() {
    std::process::exit(tpde_cli::run(std::env::args_os()));
}
