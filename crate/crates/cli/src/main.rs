fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(invedit_cli::run_command(&args));
}
