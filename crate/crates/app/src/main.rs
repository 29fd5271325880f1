fn main() -> std::process::ExitCode {
    condmdi_app::cli::run(std::env::args_os())
}
