fn main() {
    std::process::exit(oodlab_core::runner::cli_main(std::env::args_os()));
}
