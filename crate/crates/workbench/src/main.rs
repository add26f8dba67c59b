fn main() {
    std::process::exit(cpql_workbench::cli::run(std::env::args_os()));
}
