//! Panoptic label ids.
//!
//! Stuff classes occupy small ids; building instances start at
//! [`FIRST_INSTANCE`] and are unique across the whole map.

pub type LabelId = u32;

pub const VOID: LabelId = 0;
pub const SKY: LabelId = 1;
pub const ROAD: LabelId = 2;

/// Number of stuff classes (void, sky, road).
pub const STUFF_CLASS_COUNT: usize = 3;

pub const FIRST_INSTANCE: LabelId = 1000;

pub fn is_building(label: LabelId) -> bool {
    label >= FIRST_INSTANCE
}
