//! Volume data model, MVOL I/O, normalisation and the minimum filter.

mod filter;
mod mvol;
mod volume;

pub use filter::{min_filter, window_offsets, MIN_KERNEL};
pub use mvol::{
    decode_mvol, encode_mvol, read_mvol, read_sidecar, read_sidecar_file, role, sidecar_path,
    write_mvol, write_sidecar, Sidecar, HEADER_LEN,
};
pub use volume::{box_to_mask, boxes_to_mask, normalize, BoundingBox, Volume, TARGET_MEAN, TARGET_STD};
