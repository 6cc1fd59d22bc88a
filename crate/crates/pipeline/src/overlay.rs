//! PNG cut through the reconstruction with the segmentation blended on top.

use photovol::eval::LabelVolume;
use photovol::Volume;

use crate::case::{Case, StageName};
use crate::error::{PipelineError, Result};
use crate::imageio::encode_rgb8;
use crate::nifti::{read_volume, Nifti};

const COLOURS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Axis> {
        match s {
            "x" | "sagittal" => Ok(Axis::X),
            "y" | "coronal" => Ok(Axis::Y),
            "z" | "axial" => Ok(Axis::Z),
            _ => Err(PipelineError::Annotation(format!(
                "unknown axis {s}; use x, y or z"
            ))),
        }
    }
}

/// Render plane `index` across `axis` of `image`, tinting voxels whose
/// label is non-zero.
pub fn render_plane(
    image: &Volume<f32>,
    labels: Option<&LabelVolume>,
    axis: Axis,
    index: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let [nx, ny, nz] = image.dims();
    let (w, h, n) = match axis {
        Axis::X => (ny, nz, nx),
        Axis::Y => (nx, nz, ny),
        Axis::Z => (nx, ny, nz),
    };
    if index >= n {
        return Err(PipelineError::missing(
            format!("plane {index}"),
            format!("the volume has {n} planes along this axis"),
        ));
    }
    let labels = labels.filter(|l| l.grid.dims == image.dims());
    let ch = image.channels();
    let mut raw = Vec::with_capacity(w * h * 3);
    // rows run top to bottom, so flip the second in-plane axis
    for r in (0..h).rev() {
        for c in 0..w {
            let [i, j, k] = match axis {
                Axis::X => [index, c, r],
                Axis::Y => [c, index, r],
                Axis::Z => [c, r, index],
            };
            let mut px = [0.0f64; 3];
            for (d, v) in px.iter_mut().enumerate() {
                *v = image.get(i, j, k, d.min(ch - 1)) as f64 * 255.0;
            }
            if let Some(l) = labels {
                let lab = l.labels[l.grid.index(i, j, k)];
                if lab > 0 {
                    let col = COLOURS[(lab as usize - 1) % COLOURS.len()];
                    for d in 0..3 {
                        px[d] = 0.5 * px[d] + 0.5 * col[d] as f64;
                    }
                }
            }
            raw.extend(px.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    Ok((w, h, raw))
}

/// PNG overlay for a case; the segmentation is drawn when present.
pub fn overlay_png(case: &Case, axis: Axis, index: usize) -> Result<Vec<u8>> {
    let rdir = case.stage_dir(StageName::Reconstruct);
    let img_path = rdir.join("image.nii");
    if !img_path.is_file() {
        return Err(PipelineError::missing(
            "recon/image.nii",
            "run the reconstruction first",
        ));
    }
    let image: Volume<f32> = read_volume(&img_path)?;
    let seg_path = case.stage_dir(StageName::Segment).join("seg.nii");
    let labels = if seg_path.is_file() {
        Some(Nifti::read(&seg_path)?.to_labels()?)
    } else {
        None
    };
    let (w, h, raw) = render_plane(&image, labels.as_ref(), axis, index)?;
    Ok(encode_rgb8(w, h, raw))
}
