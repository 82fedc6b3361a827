use super::raster::BinaryMask;
use crate::error::{Error, Result};

/// Places masks side by side. The result is as wide as all inputs together
/// and as tall as the tallest; shorter masks are padded with zeros below.
pub fn concat_masks(masks: &[BinaryMask]) -> Result<BinaryMask> {
    match masks {
        [] => Err(Error::Contract("concat_masks needs at least one mask".into())),
        [only] => Ok(only.clone()),
        _ => {
            let total_width = masks.iter().map(BinaryMask::width).sum();
            let total_height = masks.iter().map(BinaryMask::height).max().unwrap_or(0);
            let mut out = BinaryMask::zeros(total_width, total_height);
            let mut x = 0;
            for m in masks {
                if m.channels() != 1 {
                    return Err(Error::Data("masks must have one channel".into()));
                }
                out.blit(m, x, 0)?;
                x += m.width();
            }
            Ok(out)
        }
    }
}

/// Pixelwise maximum of same-sized masks.
pub fn union_masks(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::Contract("union_masks needs at least one mask".into()))?;
    let mut out = first.clone();
    for m in rest {
        out.same_dims(m, "union_masks")?;
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = (*o).max(v);
        }
    }
    Ok(out)
}
