fn main() {
    std::process::exit(outpaint_core::cli::run(std::env::args_os()));
}
