use image::{imageops, Rgb, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{PatchId, PatchImage};

/// Question sent with every composite image.
pub const PROMPT_TEMPLATE: &str = "On the left side is some examples of the symbols of a historical map including the class Wood and Settlement. On the right side is an image of historical map patch. For the right image, please answer the following question with Yes or No and give reasons for the answer:
1. Does the image contain Wood?
2. Does the image contain Settlement?
Formatting the answer with the following structure:
1. **Wood?** [Yes/No] : [reason]
2. **Settlement?** [Yes/No] : [reason]";

/// Width of the vertical bar between legend and patch.
pub const SEPARATOR_PX: u32 = 8;
const SEPARATOR: Rgb<u8> = Rgb([64, 64, 64]);

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub patch: PatchId,
    /// Legend, separator and patch side by side.
    pub composite: RgbImage,
    pub prompt_text: String,
}

impl PromptBundle {
    /// Hex SHA-256 over the composite's size and pixels and the prompt text.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.composite.width().to_le_bytes());
        h.update(self.composite.height().to_le_bytes());
        h.update(self.composite.as_raw());
        h.update((self.prompt_text.len() as u64).to_le_bytes());
        h.update(self.prompt_text.as_bytes());
        hex::encode(h.finalize())
    }

    /// Composite encoded as PNG.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.composite.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

/// Place `legend` left of the patch. A legend whose height differs from the
/// patch is rescaled to the patch height, keeping its aspect ratio.
pub fn build_prompt(patch: &PatchImage, legend: &RgbImage) -> Result<PromptBundle> {
    if legend.width() == 0 || legend.height() == 0 {
        return Err(Error::InvalidArgument("legend image is empty".into()));
    }
    let tile = patch.to_rgb8();
    let h = tile.height();
    let legend = if legend.height() == h {
        legend.clone()
    } else {
        let w = ((legend.width() as f64 * h as f64 / legend.height() as f64).round() as u32).max(1);
        imageops::resize(legend, w, h, imageops::FilterType::Triangle)
    };
    let width = legend.width() + SEPARATOR_PX + tile.width();
    let mut composite = RgbImage::from_pixel(width, h, SEPARATOR);
    imageops::replace(&mut composite, &legend, 0, 0);
    imageops::replace(&mut composite, &tile, i64::from(legend.width() + SEPARATOR_PX), 0);
    Ok(PromptBundle {
        patch: patch.id.clone(),
        composite,
        prompt_text: PROMPT_TEMPLATE.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SheetId;
    use ndarray::Array3;

    fn patch(col: u32, v: f32) -> PatchImage {
        PatchImage::new(
            PatchId::new(SheetId::new("s").unwrap(), 0, col),
            Array3::from_elem((384, 384, 3), v),
        )
        .unwrap()
    }

    #[test]
    fn composite_geometry() {
        let legend = RgbImage::from_pixel(200, 384, Rgb([1, 2, 3]));
        let b = build_prompt(&patch(0, 1.0), &legend).unwrap();
        assert_eq!(b.composite.dimensions(), (200 + SEPARATOR_PX + 384, 384));
        assert_eq!(*b.composite.get_pixel(0, 0), Rgb([1, 2, 3]));
        assert_eq!(*b.composite.get_pixel(200, 10), SEPARATOR);
        assert_eq!(*b.composite.get_pixel(200 + SEPARATOR_PX, 10), Rgb([255, 255, 255]));
    }

    #[test]
    fn legend_is_rescaled_to_patch_height() {
        let legend = RgbImage::from_pixel(100, 192, Rgb([9, 9, 9]));
        let b = build_prompt(&patch(0, 0.0), &legend).unwrap();
        assert_eq!(b.composite.dimensions(), (200 + SEPARATOR_PX + 384, 384));
    }

    #[test]
    fn template_and_hash() {
        let legend = RgbImage::from_pixel(50, 384, Rgb([0, 0, 0]));
        let a = build_prompt(&patch(0, 0.2), &legend).unwrap();
        let b = build_prompt(&patch(1, 0.8), &legend).unwrap();
        assert!(a.prompt_text.contains("1. **Wood?** [Yes/No] : [reason]"));
        assert!(a.prompt_text.contains("2. **Settlement?** [Yes/No] : [reason]"));
        assert_eq!(a.prompt_text, b.prompt_text);
        assert_ne!(a.composite, b.composite);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
        assert!(matches!(build_prompt(&patch(0, 0.0), &RgbImage::new(0, 0)), Err(Error::InvalidArgument(_))));
    }
}
