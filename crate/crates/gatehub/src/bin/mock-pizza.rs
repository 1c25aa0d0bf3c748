fn main() {
    std::process::exit(gatehub::stub::run(gatehub::stub::Tool::Pizza, std::env::args_os()));
}
