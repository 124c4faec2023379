use crate::error::{Error, Result};

/// Image-level presence vector of a segmentation map.
///
/// Entry `k` is set iff some pixel carries class `k`; `ignore_index` pixels
/// contribute nothing.
pub fn build_multilabel_target(seg_map: &[u16], num_classes: usize, ignore_index: u16) -> Result<Vec<bool>> {
    let mut target = vec![false; num_classes];
    for &c in seg_map {
        if c == ignore_index {
            continue;
        }
        let c = c as usize;
        if c >= num_classes {
            return Err(Error::ClassOutOfRange {
                id: c,
                num_classes,
            });
        }
        target[c] = true;
    }
    Ok(target)
}
