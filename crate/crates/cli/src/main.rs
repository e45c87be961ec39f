use std::io::{stderr, stdout};

fn main() {
    let seed = std::env::var(cdyn_core::dataio::SEED_ENV).ok();
    let outcome = cdyn_cli::run(std::env::args_os(), seed, &mut stdout().lock(), &mut stderr().lock());
    std::process::exit(outcome.code);
}
