fn main() {
    std::process::exit(spoofmeter_cli::run(std::env::args_os()));
}
