fn main() {
    std::process::exit(pdp_ocp::cli::run(std::env::args_os()));
}
