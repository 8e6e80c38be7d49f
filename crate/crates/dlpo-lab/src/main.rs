use dlpo_lab::cli;

fn main() {
    std::process::exit(cli::run());
}
