fn main() -> std::process::ExitCode {
    carope::cli::main()
}
