fn main() {
    std::process::exit(judge_audit::cli::main_with_args(std::env::args_os()));
}
