fn main() {
    std::process::exit(gatehub::stub::run(gatehub::stub::Tool::Debyer, std::env::args_os()));
}
