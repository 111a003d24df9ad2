fn main() {
    if let Err(e) = mcsd_bench::cli::run(std::env::args_os()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
