//! Geo-alignment: select anchor features, derive a square image extent per
//! anchor, associate co-located features with pixel-space boxes, and run an
//! ordered list of pluggable image filters over the raw pool.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::geo::{aspect_ratio, GeoBBox, MercatorPoint};
use crate::ingest::{FeatureRecord, FeatureStore};

/// Scalar knobs of the alignment pipeline. Defaults carry the reference
/// values: 1 m/px imagery, 128 px minimum anchors, aspect < 4, 768 px image
/// cap, 1/64 association rule, 0.3 x 0.28 degree city scope, 20k balance
/// threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub resolution_m_per_px: f64,
    pub min_anchor_px: u32,
    pub max_aspect: f64,
    pub max_image_px: u32,
    pub feature_area_divisor: f64,
    pub extent_expansion: f64,
    pub scope_lon_deg: f64,
    pub scope_lat_deg: f64,
    pub balance_threshold: u64,
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            resolution_m_per_px: 1.0,
            min_anchor_px: 128,
            max_aspect: 4.0,
            max_image_px: 768,
            feature_area_divisor: 64.0,
            extent_expansion: 2.0,
            scope_lon_deg: 0.3,
            scope_lat_deg: 0.28,
            balance_threshold: 20_000,
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    /// All violations at once, as `field: problem` strings.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("resolution_m_per_px", self.resolution_m_per_px),
            ("max_aspect", self.max_aspect),
            ("feature_area_divisor", self.feature_area_divisor),
            ("extent_expansion", self.extent_expansion),
            ("scope_lon_deg", self.scope_lon_deg),
            ("scope_lat_deg", self.scope_lat_deg),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                v.push(format!("{name}: must be strictly positive, got {value}"));
            }
        }
        if self.min_anchor_px == 0 {
            v.push("min_anchor_px: must be strictly positive, got 0".to_string());
        }
        if self.max_image_px == 0 {
            v.push("max_image_px: must be strictly positive, got 0".to_string());
        }
        if self.balance_threshold == 0 {
            v.push("balance_threshold: must be strictly positive, got 0".to_string());
        }
        if !(self.max_aspect > 1.0) {
            v.push(format!(
                "max_aspect: must be greater than 1, got {}",
                self.max_aspect
            ));
        }
        if self.min_anchor_px > self.max_image_px {
            v.push(format!(
                "min_anchor_px: must not exceed max_image_px ({} > {})",
                self.min_anchor_px, self.max_image_px
            ));
        }
        v
    }

    /// Minimum projected area an anchor must exceed, m^2.
    pub fn anchor_area_threshold_m2(&self) -> f64 {
        let side = self.min_anchor_px as f64 * self.resolution_m_per_px;
        side * side
    }

    pub fn min_side_m(&self) -> f64 {
        self.min_anchor_px as f64 * self.resolution_m_per_px
    }

    pub fn max_side_m(&self) -> f64 {
        self.max_image_px as f64 * self.resolution_m_per_px
    }
}

/// Square geographic footprint of one image sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageExtent {
    pub footprint: GeoBBox,
    pub side_m: f64,
    pub pixel_size: u32,
    pub resolution_m_per_px: f64,
    /// Opaque locator for the imagery covering this footprint.
    pub acquisition_ref: String,
}

impl ImageExtent {
    pub fn area_m2(&self) -> f64 {
        self.side_m * self.side_m
    }
}

/// Feature box mapped into image pixel coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociatedFeature {
    pub id: i64,
    pub tags: IndexMap<String, String>,
    pub pixel_box: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "kebab-case")]
pub enum SampleStatus {
    Raw,
    FilteredOut(String),
    Retained,
}

/// An image extent paired with its anchor and associated features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSample {
    pub extent: ImageExtent,
    pub anchor_id: i64,
    pub associated: Vec<AssociatedFeature>,
    pub status: SampleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
}

#[derive(Debug)]
pub enum AlignError {
    Config(Vec<String>),
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::Config(violations) => {
                write!(f, "invalid pipeline config: {}", violations.join("; "))
            }
        }
    }
}

impl std::error::Error for AlignError {}

/// Anchor admission: projected area strictly above the pixel threshold and
/// aspect ratio strictly below the cap.
pub fn passes_anchor_gates(area_m2: f64, aspect: f64, cfg: &PipelineConfig) -> bool {
    area_m2 > cfg.anchor_area_threshold_m2() && aspect < cfg.max_aspect
}

/// Ids of features qualifying as anchors, ascending.
pub fn select_anchors(store: &FeatureStore, cfg: &PipelineConfig) -> Vec<i64> {
    store
        .records()
        .filter(|rec| {
            let area = rec.geometry.projected_area();
            let bbox = store.projected_bbox(rec.id).expect("bbox cached");
            match aspect_ratio(bbox) {
                Ok(aspect) => passes_anchor_gates(area, aspect, cfg),
                Err(_) => false,
            }
        })
        .map(|rec| rec.id)
        .collect()
}

/// Side length of the square extent for an anchor bbox of `w x h` meters:
/// expansion times the longer side, clamped to the pixel-derived bounds.
pub fn extent_side_m(w: f64, h: f64, cfg: &PipelineConfig) -> f64 {
    (cfg.extent_expansion * w.max(h)).clamp(cfg.min_side_m(), cfg.max_side_m())
}

/// Square extent centered on the anchor's projected bbox.
pub fn derive_extent(anchor: &FeatureRecord, cfg: &PipelineConfig) -> ImageExtent {
    let bbox = anchor.geometry.projected_bbox();
    let center = bbox.center();
    let side = extent_side_m(bbox.width(), bbox.height(), cfg);
    let half = side / 2.0;
    let footprint = GeoBBox {
        min: MercatorPoint {
            x: center.x - half,
            y: center.y - half,
        },
        max: MercatorPoint {
            x: center.x + half,
            y: center.y + half,
        },
    };
    let pixel_size = (side / cfg.resolution_m_per_px).round() as u32;
    ImageExtent {
        footprint,
        side_m: side,
        pixel_size,
        resolution_m_per_px: cfg.resolution_m_per_px,
        acquisition_ref: format!(
            "anchor:{}@{:.3},{:.3}+{:.3}m",
            anchor.id, center.x, center.y, side
        ),
    }
}

/// Map a projected bbox into image pixel coordinates, clipped to the frame.
pub fn map_to_pixels(bbox: &GeoBBox, extent: &ImageExtent) -> PixelBox {
    let scale = extent.pixel_size as f64 / extent.side_m;
    let fp = &extent.footprint;
    let max_px = extent.pixel_size as f64;
    let clip = |v: f64| v.clamp(0.0, max_px);
    PixelBox {
        x1: clip((bbox.min.x - fp.min.x) * scale),
        y1: clip((fp.max.y - bbox.max.y) * scale),
        x2: clip((bbox.max.x - fp.min.x) * scale),
        y2: clip((fp.max.y - bbox.min.y) * scale),
    }
}

/// Association admission: feature area strictly below extent area divided by
/// the configured divisor.
pub fn passes_association(feature_area_m2: f64, extent_area_m2: f64, divisor: f64) -> bool {
    feature_area_m2 < extent_area_m2 / divisor
}

/// Features inside the extent that pass the area rule, plus the anchor
/// unconditionally. Ascending id.
pub fn associate_features(
    extent: &ImageExtent,
    anchor: &FeatureRecord,
    store: &FeatureStore,
    cfg: &PipelineConfig,
) -> Vec<AssociatedFeature> {
    let extent_area = extent.area_m2();
    let candidates = store.query_bbox(&extent.footprint);
    let mut out = Vec::new();
    for rec in &candidates {
        let is_anchor = rec.id == anchor.id;
        let area = rec.geometry.projected_area();
        if is_anchor || passes_association(area, extent_area, cfg.feature_area_divisor) {
            let bbox = store.projected_bbox(rec.id).expect("bbox cached");
            out.push(AssociatedFeature {
                id: rec.id,
                tags: rec.tags.clone(),
                pixel_box: map_to_pixels(bbox, extent),
            });
        }
    }
    debug_assert!(
        {
            let candidate_ids: std::collections::BTreeSet<i64> =
                candidates.iter().map(|r| r.id).collect();
            out.iter().all(|a| candidate_ids.contains(&a.id) || a.id == anchor.id)
        },
        "association must be a subset of the bbox query plus the anchor"
    );
    out
}

/// Independent post-hoc check of the pool invariants: every retained sample
/// must pass the anchor gates, honor the association area rule (anchor
/// excepted), and keep its pixel boxes inside the frame.
pub fn verify_pool_invariants(
    samples: &[AlignedSample],
    store: &FeatureStore,
    cfg: &PipelineConfig,
) -> Result<(), String> {
    for sample in samples {
        if sample.status != SampleStatus::Retained {
            continue;
        }
        let anchor = store
            .get(sample.anchor_id)
            .ok_or_else(|| format!("anchor {} not in store", sample.anchor_id))?;
        let area = anchor.geometry.projected_area();
        let bbox = anchor.geometry.projected_bbox();
        let aspect = aspect_ratio(&bbox).map_err(|e| e.to_string())?;
        if !passes_anchor_gates(area, aspect, cfg) {
            return Err(format!("anchor {} fails the anchor gates", sample.anchor_id));
        }
        if !sample.associated.iter().any(|a| a.id == sample.anchor_id) {
            return Err(format!("sample {} omits its anchor", sample.anchor_id));
        }
        let extent_area = sample.extent.area_m2();
        let frame = sample.extent.pixel_size as f64;
        for feature in &sample.associated {
            if feature.id != sample.anchor_id {
                let rec = store
                    .get(feature.id)
                    .ok_or_else(|| format!("feature {} not in store", feature.id))?;
                if !passes_association(
                    rec.geometry.projected_area(),
                    extent_area,
                    cfg.feature_area_divisor,
                ) {
                    return Err(format!(
                        "feature {} in sample {} violates the area rule",
                        feature.id, sample.anchor_id
                    ));
                }
            }
            let b = &feature.pixel_box;
            let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= frame && b.y2 <= frame
                && b.x1 <= b.x2
                && b.y1 <= b.y2;
            if !inside {
                return Err(format!(
                    "feature {} in sample {} has an out-of-frame pixel box",
                    feature.id, sample.anchor_id
                ));
            }
        }
    }
    Ok(())
}

/// Keep/drop decision of one image filter.
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Keep,
    Drop(String),
}

/// A named, side-effect-free check over one sample. Stateful checks (for
/// example deduplication) carry their state in the closure.
pub struct SamplePredicate {
    pub name: String,
    check: Box<dyn FnMut(&AlignedSample) -> Result<Verdict, String> + Send>,
}

impl SamplePredicate {
    pub fn new(
        name: impl Into<String>,
        check: impl FnMut(&AlignedSample) -> Result<Verdict, String> + Send + 'static,
    ) -> Self {
        SamplePredicate {
            name: name.into(),
            check: Box::new(check),
        }
    }

    /// Drops every sample whose acquisition_ref was already seen.
    pub fn dedup_acquisition_refs() -> Self {
        let mut seen = std::collections::HashSet::new();
        SamplePredicate::new("dedup", move |sample: &AlignedSample| {
            if seen.insert(sample.extent.acquisition_ref.clone()) {
                Ok(Verdict::Keep)
            } else {
                Ok(Verdict::Drop("duplicate".to_string()))
            }
        })
    }
}

impl fmt::Debug for SamplePredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SamplePredicate")
            .field("name", &self.name)
            .finish()
    }
}

/// Per-reason drop counts from a filter pass.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub retained: u64,
    pub dropped: BTreeMap<String, u64>,
}

/// Run the ordered predicate list over every sample. The first failing
/// predicate stamps the drop reason; a predicate error stamps
/// `predicate-error:<name>` and the run continues.
pub fn apply_image_filters(
    samples: &mut [AlignedSample],
    predicates: &mut [SamplePredicate],
) -> FilterStats {
    let mut stats = FilterStats::default();
    for sample in samples.iter_mut() {
        let mut verdict = Verdict::Keep;
        for pred in predicates.iter_mut() {
            match (pred.check)(sample) {
                Ok(Verdict::Keep) => continue,
                Ok(Verdict::Drop(reason)) => {
                    verdict = Verdict::Drop(reason);
                    break;
                }
                Err(err) => {
                    log::warn!("predicate {} failed: {err}", pred.name);
                    verdict = Verdict::Drop(format!("predicate-error:{}", pred.name));
                    break;
                }
            }
        }
        match verdict {
            Verdict::Keep => {
                sample.status = SampleStatus::Retained;
                stats.retained += 1;
            }
            Verdict::Drop(reason) => {
                *stats.dropped.entry(reason.clone()).or_default() += 1;
                sample.status = SampleStatus::FilteredOut(reason);
            }
        }
    }
    stats
}

/// Per-stage counts recorded while building the raw pool.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub features: u64,
    pub anchors: u64,
    pub samples: u64,
    pub retained: u64,
    pub dropped: BTreeMap<String, u64>,
}

/// Full alignment pass: anchors -> extents -> association -> image filters.
/// Deterministic for a given (store, config, predicate list).
pub fn build_raw_pool(
    store: &FeatureStore,
    cfg: &PipelineConfig,
    predicates: &mut [SamplePredicate],
) -> Result<(Vec<AlignedSample>, PoolManifest), AlignError> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(AlignError::Config(violations));
    }

    let anchors = select_anchors(store, cfg);
    let mut samples = Vec::with_capacity(anchors.len());
    for id in &anchors {
        let anchor = store.get(*id).expect("anchor id from store");
        let extent = derive_extent(anchor, cfg);
        let associated = associate_features(&extent, anchor, store, cfg);
        samples.push(AlignedSample {
            extent,
            anchor_id: *id,
            associated,
            status: SampleStatus::Raw,
            country: anchor.country.clone(),
            city: anchor.city.clone(),
        });
    }

    let stats = apply_image_filters(&mut samples, predicates);
    let manifest = PoolManifest {
        features: store.len() as u64,
        anchors: anchors.len() as u64,
        samples: samples.len() as u64,
        retained: stats.retained,
        dropped: stats.dropped,
    };
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_all;

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    /// Rectangle of roughly `w x h` meters at the equator, in lon/lat.
    fn rect_line(id: i64, lon0: f64, lat0: f64, w_m: f64, h_m: f64, tags: &str) -> String {
        let dlon = w_m / 111_319.490_793_273_57;
        let dlat = h_m / 111_319.490_793_273_57;
        format!(
            r#"{{"id": {id}, "geometry": {{"type": "Polygon", "coordinates": [[[{a}, {b}], [{c}, {b}], [{c}, {d}], [{a}, {d}], [{a}, {b}]]]}}, "tags": {tags}}}"#,
            a = lon0,
            b = lat0,
            c = lon0 + dlon,
            d = lat0 + dlat,
        )
    }

    fn store_from(lines: &[String]) -> FeatureStore {
        let joined = lines.join("\n");
        let (records, diags) = parse_all(joined.as_bytes()).unwrap();
        assert!(diags.is_empty(), "{diags:?}");
        FeatureStore::build(records, "test").unwrap()
    }

    #[test]
    fn anchor_gates_use_strict_inequalities() {
        let c = cfg();
        assert_eq!(c.anchor_area_threshold_m2(), 16_384.0);
        assert!(passes_anchor_gates(20_000.0, 1.5, &c));
        assert!(!passes_anchor_gates(16_384.0, 1.5, &c));
        assert!(passes_anchor_gates(16_384.0 + 1e-9, 1.5, &c));
        assert!(!passes_anchor_gates(20_000.0, 4.0, &c));
        assert!(passes_anchor_gates(20_000.0, 3.999_999, &c));
    }

    #[test]
    fn association_rule_is_strict() {
        assert!(passes_association(9_000.0, 589_824.0, 64.0));
        assert!(!passes_association(9_216.0, 589_824.0, 64.0));
    }

    #[test]
    fn select_anchors_filters_small_and_slender() {
        let lines = vec![
            rect_line(1, 0.0, 0.0, 200.0, 150.0, r#"{"landuse": "residential"}"#),
            // Roughly 100 x 100 m: below the area threshold.
            rect_line(2, 0.1, 0.0, 100.0, 100.0, r#"{"landuse": "farm"}"#),
            // 1000 x 200 m: aspect 5 is too slender.
            rect_line(3, 0.2, 0.0, 1_000.0, 200.0, r#"{"landuse": "meadow"}"#),
        ];
        let store = store_from(&lines);
        assert_eq!(select_anchors(&store, &cfg()), vec![1]);
    }

    #[test]
    fn extent_side_formula() {
        let c = cfg();
        assert_eq!(extent_side_m(200.0, 150.0, &c), 400.0);
        assert_eq!(extent_side_m(500.0, 500.0, &c), 768.0);
        assert_eq!(extent_side_m(10.0, 10.0, &c), 128.0);
    }

    #[test]
    fn derive_extent_is_centered_square() {
        let lines = vec![rect_line(1, 0.0, 0.0, 200.0, 150.0, r#"{"a": "b"}"#)];
        let store = store_from(&lines);
        let anchor = store.get(1).unwrap();
        let extent = derive_extent(anchor, &cfg());

        let bbox = anchor.geometry.projected_bbox();
        let center = bbox.center();
        let got = extent.footprint.center();
        assert!((got.x - center.x).abs() < 1e-6);
        assert!((got.y - center.y).abs() < 1e-6);
        assert!((extent.footprint.width() - extent.side_m).abs() < 1e-6);
        assert!((extent.footprint.height() - extent.side_m).abs() < 1e-6);
        assert_eq!(
            extent.pixel_size,
            (extent.side_m / cfg().resolution_m_per_px).round() as u32
        );
    }

    #[test]
    fn associate_features_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut lines = vec![rect_line(0, 0.0, 0.0, 400.0, 380.0, r#"{"anchor": "yes"}"#)];
        for id in 1..=100 {
            let lon = rng.gen_range(-0.02..0.02);
            let lat = rng.gen_range(-0.02..0.02);
            let w = rng.gen_range(20.0..400.0);
            let h = rng.gen_range(20.0..400.0);
            lines.push(rect_line(id, lon, lat, w, h, r#"{"k": "v"}"#));
        }
        let store = store_from(&lines);
        let c = cfg();
        let anchor = store.get(0).unwrap();
        let extent = derive_extent(anchor, &c);

        let got: Vec<i64> = associate_features(&extent, anchor, &store, &c)
            .iter()
            .map(|a| a.id)
            .collect();

        let extent_area = extent.area_m2();
        let mut expect: Vec<i64> = store
            .records()
            .filter(|rec| {
                store
                    .projected_bbox(rec.id)
                    .unwrap()
                    .intersects(&extent.footprint)
                    && (rec.id == 0
                        || passes_association(
                            rec.geometry.projected_area(),
                            extent_area,
                            c.feature_area_divisor,
                        ))
            })
            .map(|rec| rec.id)
            .collect();
        expect.sort_unstable();
        assert_eq!(got, expect);
        assert!(got.contains(&0), "anchor always associated");
    }

    #[test]
    fn pixel_boxes_stay_in_frame() {
        let lines = vec![
            rect_line(0, 0.0, 0.0, 300.0, 300.0, r#"{"anchor": "yes"}"#),
            // Far larger than the extent: box must clip to the frame.
            rect_line(1, -0.01, -0.01, 3_000.0, 3_000.0, r#"{"k": "v"}"#),
        ];
        let store = store_from(&lines);
        let c = cfg();
        let anchor = store.get(0).unwrap();
        let extent = derive_extent(anchor, &c);
        for rec_id in [0i64, 1] {
            let bbox = store.projected_bbox(rec_id).unwrap();
            let px = map_to_pixels(bbox, &extent);
            let max = extent.pixel_size as f64;
            assert!(px.x1 >= 0.0 && px.x2 <= max && px.x1 <= px.x2);
            assert!(px.y1 >= 0.0 && px.y2 <= max && px.y1 <= px.y2);
        }
    }

    fn dummy_sample(id: i64, acq: &str) -> AlignedSample {
        AlignedSample {
            extent: ImageExtent {
                footprint: GeoBBox {
                    min: MercatorPoint { x: 0.0, y: 0.0 },
                    max: MercatorPoint { x: 128.0, y: 128.0 },
                },
                side_m: 128.0,
                pixel_size: 128,
                resolution_m_per_px: 1.0,
                acquisition_ref: acq.to_string(),
            },
            anchor_id: id,
            associated: Vec::new(),
            status: SampleStatus::Raw,
            country: None,
            city: None,
        }
    }

    #[test]
    fn empty_predicate_list_retains_all() {
        let mut samples = vec![dummy_sample(1, "a"), dummy_sample(2, "b")];
        let stats = apply_image_filters(&mut samples, &mut []);
        assert_eq!(stats.retained, 2);
        assert!(samples.iter().all(|s| s.status == SampleStatus::Retained));
    }

    #[test]
    fn dedup_predicate_drops_duplicates() {
        let mut samples = vec![
            dummy_sample(1, "same"),
            dummy_sample(2, "same"),
            dummy_sample(3, "other"),
        ];
        let mut preds = vec![SamplePredicate::dedup_acquisition_refs()];
        let stats = apply_image_filters(&mut samples, &mut preds);
        assert_eq!(stats.retained, 2);
        assert_eq!(stats.dropped["duplicate"], 1);
        assert_eq!(
            samples[1].status,
            SampleStatus::FilteredOut("duplicate".to_string())
        );
    }

    #[test]
    fn first_failing_predicate_wins() {
        let mut samples = vec![dummy_sample(1, "a")];
        let mut preds = vec![
            SamplePredicate::new("drop-all", |_: &AlignedSample| {
                Ok(Verdict::Drop("first".to_string()))
            }),
            SamplePredicate::new("keep-all", |_: &AlignedSample| Ok(Verdict::Keep)),
        ];
        apply_image_filters(&mut samples, &mut preds);
        assert_eq!(
            samples[0].status,
            SampleStatus::FilteredOut("first".to_string())
        );
    }

    #[test]
    fn predicate_error_stamps_and_continues() {
        let mut samples = vec![dummy_sample(1, "a"), dummy_sample(2, "b")];
        let mut preds = vec![SamplePredicate::new("flaky", |s: &AlignedSample| {
            if s.anchor_id == 1 {
                Err("boom".to_string())
            } else {
                Ok(Verdict::Keep)
            }
        })];
        let stats = apply_image_filters(&mut samples, &mut preds);
        assert_eq!(stats.retained, 1);
        assert_eq!(
            samples[0].status,
            SampleStatus::FilteredOut("predicate-error:flaky".to_string())
        );
        assert_eq!(samples[1].status, SampleStatus::Retained);
    }

    #[test]
    fn empty_store_yields_empty_pool() {
        let store = FeatureStore::build(Vec::new(), "d").unwrap();
        let (samples, manifest) = build_raw_pool(&store, &cfg(), &mut []).unwrap();
        assert!(samples.is_empty());
        assert_eq!(manifest.anchors, 0);
        assert_eq!(manifest.retained, 0);
    }

    #[test]
    fn build_raw_pool_deterministic() {
        let lines = vec![
            rect_line(1, 0.0, 0.0, 200.0, 150.0, r#"{"landuse": "residential"}"#),
            rect_line(2, 0.003, 0.001, 50.0, 50.0, r#"{"natural": "water"}"#),
            rect_line(3, 0.3, 0.0, 500.0, 450.0, r#"{"landuse": "farmland"}"#),
        ];
        let store = store_from(&lines);
        let (a, ma) = build_raw_pool(&store, &cfg(), &mut []).unwrap();
        let (b, mb) = build_raw_pool(&store, &cfg(), &mut []).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        verify_pool_invariants(&a, &store, &cfg()).unwrap();
    }

    #[test]
    fn validator_catches_tampered_pool() {
        let lines = vec![rect_line(1, 0.0, 0.0, 300.0, 280.0, r#"{"landuse": "residential"}"#)];
        let store = store_from(&lines);
        let (mut samples, _) = build_raw_pool(&store, &cfg(), &mut []).unwrap();
        samples[0].associated[0].pixel_box.x2 = 1e9;
        assert!(verify_pool_invariants(&samples, &store, &cfg())
            .unwrap_err()
            .contains("pixel box"));
    }

    #[test]
    fn invalid_config_is_rejected_with_all_violations() {
        let store = FeatureStore::build(Vec::new(), "d").unwrap();
        let mut bad = cfg();
        bad.resolution_m_per_px = -1.0;
        bad.max_aspect = 0.5;
        let err = build_raw_pool(&store, &bad, &mut []).unwrap_err();
        let AlignError::Config(violations) = err;
        assert!(violations.len() >= 2, "{violations:?}");
    }
}
