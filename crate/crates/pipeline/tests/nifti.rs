use std::path::Path;

use photovol_pipeline::nifti::{read_volume, write_volume, Nifti, NiftiData};
use proptest::prelude::*;

fn affine(vs: [f64; 3], origin: [f64; 3]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for a in 0..3 {
        m[a][a] = vs[a];
        m[a][3] = origin[a];
    }
    m[3][3] = 1.0;
    m
}

#[test]
fn four_dimensional_probability_map_with_36_labels() {
    let dims = [5, 4, 3, 36];
    let plane = 5 * 4 * 3;
    // channel t of voxel v holds a distinct value so any mix-up shows
    let data: Vec<f32> = (0..plane * 36)
        .map(|i| (i % plane) as f32 + (i / plane) as f32 / 64.0)
        .collect();
    let img = Nifti {
        dims,
        affine: affine([2.0, 2.0, 2.5], [-4.0, -3.0, -2.5]),
        data: NiftiData::F32(data),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("atlas.nii");
    img.write(&path).unwrap();

    let back = Nifti::read(&path).unwrap();
    assert_eq!(back, img);
    let vol = read_volume::<f64>(&path).unwrap();
    assert_eq!(vol.dims(), [5, 4, 3]);
    assert_eq!(vol.channels(), 36);
    for v in [0usize, 17, plane - 1] {
        for t in [0usize, 9, 35] {
            assert_eq!(vol.data()[v * 36 + t], v as f64 + t as f64 / 64.0);
        }
    }
    let path2 = dir.path().join("again.nii");
    write_volume(&path2, &vol).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn truncated_files_are_rejected() {
    let img = Nifti {
        dims: [2, 2, 2, 1],
        affine: affine([1.0; 3], [0.0; 3]),
        data: NiftiData::U8(vec![1; 8]),
    };
    let bytes = img.to_bytes();
    assert!(Nifti::parse(&bytes[..bytes.len() - 1], Path::new("t.nii")).is_err());
    assert!(Nifti::parse(&bytes[..100], Path::new("t.nii")).is_err());
}

proptest! {
    #[test]
    fn float32_voxels_round_trip_bit_exact(
        nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, nt in 1usize..4,
        seed in any::<u64>(),
        vs in prop::array::uniform3(0.25f64..4.0),
    ) {
        let n = nx * ny * nz * nt;
        let mut state = seed;
        let data: Vec<f32> = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 32) as u32)
            })
            .collect();
        // the affine is stored single precision, so use representable values
        let vs = vs.map(|v| v as f32 as f64);
        let img = Nifti { dims: [nx, ny, nz, nt], affine: affine(vs, [1.5, -2.0, 0.25]), data: NiftiData::F32(data.clone()) };
        let back = Nifti::parse(&img.to_bytes(), Path::new("p.nii")).unwrap();
        prop_assert_eq!(back.dims, img.dims);
        prop_assert_eq!(back.affine, img.affine);
        match back.data {
            NiftiData::F32(v) => {
                prop_assert!(v.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            NiftiData::U8(_) => prop_assert!(false, "datatype changed"),
        }
    }
}
