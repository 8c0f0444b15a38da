//! File formats: WAV audio, FGC1 binary arrays and CSV feature tables.

mod fgc1;
mod table;
mod wav;

pub use fgc1::{Dtype, Fgc1Array, FGC1_HEADER_LEN, FGC1_MAGIC};
pub use table::write_csv;
pub use wav::{read_wav, resample_linear, write_wav};
