use ibpcl_cli::pgm::{emit_pgm, Raster};
use proptest::prelude::*;

fn grid() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<Vec<f64>>)> {
    (1usize..5, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(h, w, rows, cols)| {
        let image = prop::collection::vec(0.0f64..=1.0, h * w);
        prop::collection::vec(image, rows * cols).prop_map(move |images| (h, w, rows, cols, images))
    })
}

proptest! {
    #[test]
    fn written_grids_read_back_within_one_level((h, w, rows, cols, images) in grid()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.pgm");
        let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let written = emit_pgm(&refs, h, w, rows, cols, &path).unwrap();
        let read = Raster::parse(&std::fs::read(&path).unwrap()).unwrap();
        prop_assert_eq!(&read, &written);
        prop_assert_eq!((read.height, read.width), (rows * h + rows - 1, cols * w + cols - 1));
        for (index, img) in images.iter().enumerate() {
            let (top, left) = ((index / cols) * (h + 1), (index % cols) * (w + 1));
            for r in 0..h {
                for c in 0..w {
                    let back = read.pixels[(top + r) * read.width + left + c] as f64 / 255.0;
                    prop_assert!((back - img[r * w + c]).abs() <= 1.0 / 255.0);
                }
            }
        }
    }
}
