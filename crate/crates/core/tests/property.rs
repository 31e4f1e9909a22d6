//! Randomized round-trip and partition properties.

use proptest::prelude::*;

use oceanfm::eval::kfold_split;
use oceanfm::io::{decode_tile, encode_tile};
use oceanfm::mae::{patchify, unpatchify};
use oceanfm::tile::{BandSet, Tile, TileMeta};
use oceanfm::Tensor;

fn arb_tile() -> impl Strategy<Value = Tile> {
    (1usize..4, 2usize..8, 2usize..8).prop_flat_map(|(c, h, w)| {
        proptest::collection::vec(
            prop_oneof![3 => -1e3f32..1e3f32, 1 => Just(f32::NAN)],
            c * h * w,
        )
        .prop_map(move |planes| {
            let validity: Vec<bool> = planes.iter().map(|v| !v.is_nan()).collect();
            let names = (0..c).map(|i| format!("B{i:02}")).collect();
            Tile::new(BandSet::new(names).unwrap(), h, w, planes, validity, TileMeta::default())
                .unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tile_serialization_round_trips(tile in arb_tile()) {
        let bytes = encode_tile(&tile).unwrap();
        let back = decode_tile(&bytes).unwrap();
        prop_assert_eq!(back.height, tile.height);
        prop_assert_eq!(back.width, tile.width);
        prop_assert_eq!(&back.validity, &tile.validity);
        for (a, b) in back.planes.iter().zip(&tile.planes) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.meta, tile.meta);
    }

    #[test]
    fn patchify_round_trips(
        c in 1usize..5,
        grid in 1usize..12,
        seed in any::<u64>(),
    ) {
        let (h, w) = (grid * 2, grid * 2);
        let mut state = seed;
        let data: Vec<f64> = (0..c * h * w)
            .map(|_| {
                // splitmix64-style generator keeps the test self-contained
                state = state.wrapping_add(0x9e3779b97f4a7c15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
                (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let image = Tensor::new(vec![c, h, w], data.clone()).unwrap();
        let tokens = patchify(&image, 2).unwrap();
        prop_assert_eq!(tokens.shape(), &[grid * grid, c * 4]);
        let back = unpatchify(&tokens, c, h, w, 2).unwrap();
        for (a, b) in back.data().iter().zip(&data) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn kfold_is_a_partition(n in 2usize..400, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let plan = kfold_split(n, k, seed).unwrap();
        let mut all: Vec<usize> = plan.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.len()).collect();
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(max - min <= 1, "unbalanced folds: {:?}", sizes);
    }
}
