fn main() {
    std::process::exit(spl3d::pipeline::run_command(std::env::args_os()));
}
