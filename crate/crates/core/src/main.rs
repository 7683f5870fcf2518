fn main() {
    scrl_core::cli::init_logging();
    std::process::exit(scrl_core::cli::dispatch(std::env::args_os()));
}
