fn main() -> std::process::ExitCode {
    mgms_cli::main_with(std::env::args_os())
}
