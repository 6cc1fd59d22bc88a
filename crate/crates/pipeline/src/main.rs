fn main() {
    std::process::exit(photovol_pipeline::cli::main_with_args(std::env::args_os()));
}
