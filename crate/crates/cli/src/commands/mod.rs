//! One module per subcommand. Each stage reads its inputs from and writes its
//! outputs to the configured output directory.

pub mod ingest;
pub mod map;
pub mod profile;
pub mod report;
pub mod screen;
pub mod simulate;
