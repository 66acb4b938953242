fn main() {
    std::process::exit(evtransfer_cli::run(std::env::args_os()));
}
