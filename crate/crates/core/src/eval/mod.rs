//! Ground-truth phantoms and the metrics used to score results against them.

pub mod overlap;
pub mod phantom;
pub mod segphantom;
pub mod stats;

pub use overlap::{
    dice_label_volumes, dice_per_structure, hard_volumes, resample_labels_nearest,
    structure_volumes, DiceRow, LabelVolume, VolumeRow,
};
pub use phantom::{make_phantom, Phantom, PhantomShape, PhantomSpec};
pub use segphantom::{
    atlas_from_shape, field_rms_after_gauge, make_seg_phantom, SegPhantom, SegPhantomSpec,
};
pub use stats::{pearson, Correlation};
