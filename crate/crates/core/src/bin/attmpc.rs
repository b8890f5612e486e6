fn main() {
    std::process::exit(attitude_mpc::harness::cli::run(std::env::args_os()));
}
