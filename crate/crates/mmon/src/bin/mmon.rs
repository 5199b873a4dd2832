fn main() -> std::process::ExitCode {
    mmon::cli::main_with_args(std::env::args_os())
}
