pub mod cv;
pub mod fit;
pub mod impute;
pub mod report;
pub mod simulate;
