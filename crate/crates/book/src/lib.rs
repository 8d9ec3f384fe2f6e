//! Runs every code block of the guide in `book/` as a doctest, so the guide
//! cannot drift from the library.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(intro, "intro.md");
chapter!(mdps, "mdps.md");
chapter!(randomness, "randomness.md");
chapter!(rstat, "rstat.md");
chapter!(rpvi, "rpvi.md");
chapter!(reprmax, "reprmax.md");
chapter!(rep_mdp, "rep_mdp.md");
chapter!(gridworld, "gridworld.md");
chapter!(experiments, "experiments.md");
chapter!(cli, "cli.md");
