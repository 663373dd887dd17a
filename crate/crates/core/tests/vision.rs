mod common;

use mpdoc_core::model::Model;
use mpdoc_core::vision::{roi_pool, scale_bbox, CellRegion, FeatureMap};
use mpdoc_core::{BBox, Raster, Tensor};
use proptest::prelude::*;

fn map(c: usize, h: usize, w: usize, vals: &[f64]) -> FeatureMap<f64> {
    FeatureMap { values: Tensor::from_f64(&[c, h, w], &vals[..c * h * w]).unwrap(), stride: 4 }
}

proptest! {
    #[test]
    fn pooling_a_split_region_is_the_max_of_its_parts(
        vals in prop::collection::vec(-5.0f64..5.0, 2 * 8 * 9),
        (top, bottom) in (0usize..8).prop_flat_map(|t| (Just(t), t + 1..=8)),
        (left, split, right) in (0usize..7).prop_flat_map(|l| (Just(l), l + 1..9)).prop_flat_map(|(l, s)| (Just(l), Just(s), s + 1..=9)),
    ) {
        let m = map(2, 8, 9, &vals);
        let whole = roi_pool(&m, CellRegion { left, top, right, bottom });
        let a = roi_pool(&m, CellRegion { left, top, right: split, bottom });
        let b = roi_pool(&m, CellRegion { left: split, top, right, bottom });
        for c in 0..2 {
            prop_assert_eq!(whole[c], a[c].max(b[c]));
        }
    }

    #[test]
    fn scaled_regions_nest_like_their_boxes(
        x in 0u32..500, y in 0u32..700, w in 1u32..60, h in 1u32..50, grow in 0u32..30,
    ) {
        let (page, cells) = ((563, 750), (36, 47));
        let inner = BBox::new(x, y, (x + w).min(563), (y + h).min(750));
        let outer = BBox::new(x.saturating_sub(grow), y.saturating_sub(grow), (x + w + grow).min(563), (y + h + grow).min(750));
        let (i, o) = (scale_bbox(inner, page, cells), scale_bbox(outer, page, cells));
        prop_assert!(o.left <= i.left && o.top <= i.top && o.right >= i.right && o.bottom >= i.bottom);
        prop_assert!(i.left < i.right && i.top < i.bottom);
    }
}

#[test]
fn blank_pages_give_finite_maps_and_equal_pages_equal_maps() {
    let mut cfg = common::small_config();
    cfg.backbone.frozen_stages = 0;
    let model = Model::<f64>::new(&cfg, 51).unwrap();
    let (u, v) = (cfg.page_width, cfg.page_height);
    let black = model.backbone.extract_feature_map(&model.store, &Raster::filled(u, v, [0, 0, 0])).unwrap();
    assert!(black.values.all_finite());
    assert_eq!((black.width(), black.height()), model.backbone.map_size());

    let docs = common::random_docs(&cfg, 1, 52);
    let raster = docs[0].pages[0].image().unwrap();
    let a = model.backbone.extract_feature_map(&model.store, &raster).unwrap();
    let b = model.backbone.extract_feature_map(&model.store, &raster.as_ref().clone()).unwrap();
    assert_eq!(a.values, b.values);
    assert_ne!(a.values, black.values);
}
