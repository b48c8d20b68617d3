//! Feature-extract ingestion: newline-delimited records with GeoJSON polygon
//! geometry, per-line diagnostics for malformed input, source-level key
//! filters, and a spatially indexed feature store.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::geo::{GeoBBox, LonLat, Polygon};
use crate::spatial::RTree;

/// Keys whose presence disqualifies a feature at the source level.
pub const EXCLUDED_SOURCE_KEYS: [&str; 2] = ["boundary", "barrier"];

/// One geographic object: polygon geometry plus key-value tags.
///
/// Tag order is preserved from the input record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: i64,
    pub geometry: Polygon,
    pub tags: IndexMap<String, String>,
    pub city: Option<String>,
    pub country: Option<String>,
}

/// A rejected input line: line number (1-based) plus the rule that fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: usize,
    pub rule: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}: {}", self.line, self.rule, self.message)
    }
}

#[derive(Debug)]
pub enum StoreError {
    DuplicateId {
        id: i64,
        first_index: usize,
        second_index: usize,
    },
}

impl fmt::Display for StoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreError::DuplicateId {
                id,
                first_index,
                second_index,
            } => write!(
                f,
                "duplicate feature id {id}: id {id} at record {first_index} and record {second_index}"
            ),
        }
    }
}

impl std::error::Error for StoreError {}

#[derive(Debug, Serialize, Deserialize)]
struct WireFeature {
    id: i64,
    geometry: WireGeometry,
    tags: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    city: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    country: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireGeometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<Vec<[f64; 2]>>,
}

fn parse_line(line: &str, line_no: usize) -> Result<FeatureRecord, Diagnostic> {
    let reject = |rule: &str, message: String| Diagnostic {
        line: line_no,
        rule: rule.to_string(),
        message,
    };

    let wire: WireFeature = serde_json::from_str(line)
        .map_err(|e| reject("invalid-json", e.to_string()))?;

    if wire.geometry.kind != "Polygon" {
        return Err(reject(
            "non-polygon-geometry",
            format!("geometry type {:?} is not Polygon", wire.geometry.kind),
        ));
    }
    if wire.tags.is_empty() {
        return Err(reject("empty-tags", "record carries no tags".to_string()));
    }
    if wire.geometry.coordinates.is_empty() {
        return Err(reject("empty-geometry", "no rings".to_string()));
    }

    let mut rings = Vec::with_capacity(wire.geometry.coordinates.len());
    for (ring_idx, ring) in wire.geometry.coordinates.iter().enumerate() {
        if ring.len() < 4 || ring.first() != ring.last() {
            return Err(reject(
                "ring-not-closed",
                format!("ring {ring_idx} must repeat its first position last"),
            ));
        }
        let mut verts = Vec::with_capacity(ring.len());
        for &[lon, lat] in ring {
            let v = LonLat::new(lon, lat).map_err(|e| {
                reject("coordinate-out-of-range", format!("ring {ring_idx}: {e}"))
            })?;
            verts.push(v);
        }
        rings.push(verts);
    }
    let exterior = rings.remove(0);
    let geometry = Polygon::new(exterior, rings)
        .map_err(|e| reject("invalid-geometry", e.to_string()))?;

    Ok(FeatureRecord {
        id: wire.id,
        geometry,
        tags: wire.tags,
        city: wire.city,
        country: wire.country,
    })
}

/// Lazily parse a feature extract. Well-formed lines yield records; malformed
/// lines yield diagnostics without aborting the stream. Stream-level read
/// failures surface as `io::Error`.
pub fn parse_features<R: BufRead>(
    reader: R,
) -> impl Iterator<Item = io::Result<Result<FeatureRecord, Diagnostic>>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(idx, line)| match line {
            Err(e) => Some(Err(e)),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok(parse_line(&l, idx + 1))),
        })
}

/// Drain a full extract into records and diagnostics.
pub fn parse_all<R: BufRead>(reader: R) -> io::Result<(Vec<FeatureRecord>, Vec<Diagnostic>)> {
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for item in parse_features(reader) {
        match item? {
            Ok(rec) => records.push(rec),
            Err(d) => diagnostics.push(d),
        }
    }
    Ok((records, diagnostics))
}

/// Serialize one record back to its wire line (rings re-closed).
pub fn to_wire_line(rec: &FeatureRecord) -> String {
    let close = |ring: &[LonLat]| -> Vec<[f64; 2]> {
        let mut out: Vec<[f64; 2]> = ring.iter().map(|v| [v.lon(), v.lat()]).collect();
        if let Some(first) = out.first().copied() {
            out.push(first);
        }
        out
    };
    let mut coordinates = vec![close(rec.geometry.exterior())];
    for hole in rec.geometry.holes() {
        coordinates.push(close(hole));
    }
    let wire = WireFeature {
        id: rec.id,
        geometry: WireGeometry {
            kind: "Polygon".to_string(),
            coordinates,
        },
        tags: rec.tags.clone(),
        city: rec.city.clone(),
        country: rec.country.clone(),
    };
    serde_json::to_string(&wire).expect("wire feature serializes")
}

/// Write diagnostics in the documented one-line-per-rejection format.
pub fn write_diagnostics<W: Write>(mut w: W, diagnostics: &[Diagnostic]) -> io::Result<()> {
    for d in diagnostics {
        writeln!(w, "{d}")?;
    }
    Ok(())
}

/// Outcome of the source-level filter.
#[derive(Debug, Default)]
pub struct SourceFilterOutcome {
    pub kept: Vec<FeatureRecord>,
    /// (feature id, rule) for each dropped record.
    pub dropped: Vec<(i64, String)>,
}

/// Drop records carrying any excluded source key. Key presence alone
/// disqualifies, regardless of value. Idempotent.
pub fn source_filter(records: Vec<FeatureRecord>) -> SourceFilterOutcome {
    let mut out = SourceFilterOutcome::default();
    for rec in records {
        match EXCLUDED_SOURCE_KEYS
            .iter()
            .find(|k| rec.tags.contains_key(**k))
        {
            Some(key) => out.dropped.push((rec.id, format!("excluded-key:{key}"))),
            None => out.kept.push(rec),
        }
    }
    out
}

/// Immutable feature store: records by id plus an R-tree over projected
/// bounding boxes. Safe for concurrent readers.
#[derive(Debug)]
pub struct FeatureStore {
    records: BTreeMap<i64, FeatureRecord>,
    bboxes: BTreeMap<i64, GeoBBox>,
    index: RTree,
    ids_by_slot: Vec<i64>,
    source_digest: String,
}

impl FeatureStore {
    pub fn build(
        records: Vec<FeatureRecord>,
        source_digest: impl Into<String>,
    ) -> Result<Self, StoreError> {
        let mut by_id = BTreeMap::new();
        let mut first_seen: BTreeMap<i64, usize> = BTreeMap::new();
        for (idx, rec) in records.into_iter().enumerate() {
            if let Some(&first) = first_seen.get(&rec.id) {
                return Err(StoreError::DuplicateId {
                    id: rec.id,
                    first_index: first,
                    second_index: idx,
                });
            }
            first_seen.insert(rec.id, idx);
            by_id.insert(rec.id, rec);
        }

        let mut bboxes = BTreeMap::new();
        let mut ids_by_slot = Vec::with_capacity(by_id.len());
        let mut entries = Vec::with_capacity(by_id.len());
        for (slot, (id, rec)) in by_id.iter().enumerate() {
            let bbox = rec.geometry.projected_bbox();
            bboxes.insert(*id, bbox);
            ids_by_slot.push(*id);
            entries.push((bbox, slot));
        }

        Ok(FeatureStore {
            records: by_id,
            bboxes,
            index: RTree::build(entries),
            ids_by_slot,
            source_digest: source_digest.into(),
        })
    }

    pub fn get(&self, id: i64) -> Option<&FeatureRecord> {
        self.records.get(&id)
    }

    pub fn projected_bbox(&self, id: i64) -> Option<&GeoBBox> {
        self.bboxes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All record ids, ascending.
    pub fn ids(&self) -> impl Iterator<Item = i64> + '_ {
        self.records.keys().copied()
    }

    pub fn records(&self) -> impl Iterator<Item = &FeatureRecord> {
        self.records.values()
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    /// Records whose projected bbox intersects `query`, ascending id.
    pub fn query_bbox(&self, query: &GeoBBox) -> Vec<&FeatureRecord> {
        let mut ids: Vec<i64> = self
            .index
            .query(query)
            .into_iter()
            .map(|slot| self.ids_by_slot[slot])
            .collect();
        ids.sort_unstable();
        ids.into_iter().map(|id| &self.records[&id]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::MercatorPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature_line(id: i64, tags: &str) -> String {
        format!(
            r#"{{"id": {id}, "geometry": {{"type": "Polygon", "coordinates": [[[0.0, 0.0], [0.01, 0.0], [0.01, 0.01], [0.0, 0.01], [0.0, 0.0]]]}}, "tags": {tags}}}"#
        )
    }

    #[test]
    fn parses_valid_line() {
        let input = feature_line(1, r#"{"landuse": "residential"}"#);
        let (records, diags) = parse_all(input.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert!(diags.is_empty());
        assert_eq!(records[0].tags["landuse"], "residential");
    }

    #[test]
    fn open_ring_is_diagnosed() {
        let input = r#"{"id": 1, "geometry": {"type": "Polygon", "coordinates": [[[0.0, 0.0], [0.01, 0.0], [0.01, 0.01]]]}, "tags": {"landuse": "farm"}}"#;
        let (records, diags) = parse_all(input.as_bytes()).unwrap();
        assert!(records.is_empty());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].rule, "ring-not-closed");
    }

    #[test]
    fn corrupt_middle_line_preserves_order() {
        let input = format!(
            "{}\nnot json\n{}\n",
            feature_line(1, r#"{"a": "x"}"#),
            feature_line(2, r#"{"b": "y"}"#)
        );
        let (records, diags) = parse_all(input.as_bytes()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, 1);
        assert_eq!(records[1].id, 2);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].line, 2);
        assert_eq!(diags[0].rule, "invalid-json");
    }

    #[test]
    fn non_polygon_geometry_diagnosed() {
        let input = r#"{"id": 3, "geometry": {"type": "Point", "coordinates": []}, "tags": {"a": "b"}}"#;
        let (records, diags) = parse_all(input.as_bytes()).unwrap();
        assert!(records.is_empty());
        // Point coordinates do not match the polygon shape, so either rule is
        // structurally reachable; ours reports the JSON shape mismatch first.
        assert_eq!(diags.len(), 1);
    }

    #[test]
    fn round_trip_preserves_content() {
        let input = format!(
            "{}\n{}\n",
            feature_line(1, r#"{"landuse": "residential", "surface": "asphalt"}"#),
            feature_line(9, r#"{"natural": "water"}"#)
        );
        let (records, _) = parse_all(input.as_bytes()).unwrap();
        let serialized: String = records
            .iter()
            .map(|r| to_wire_line(r) + "\n")
            .collect();
        let (reparsed, diags) = parse_all(serialized.as_bytes()).unwrap();
        assert!(diags.is_empty());
        assert_eq!(records, reparsed);
    }

    #[test]
    fn source_filter_drops_excluded_keys() {
        let lines = [
            feature_line(1, r#"{"boundary": "administrative"}"#),
            feature_line(2, r#"{"barrier": "wall", "landuse": "industrial"}"#),
            feature_line(3, r#"{"landuse": "farmland"}"#),
        ]
        .join("\n");
        let (records, _) = parse_all(lines.as_bytes()).unwrap();
        let outcome = source_filter(records);
        assert_eq!(outcome.kept.len(), 1);
        assert_eq!(outcome.kept[0].id, 3);
        assert_eq!(outcome.dropped.len(), 2);
        assert_eq!(outcome.dropped[0], (1, "excluded-key:boundary".into()));
        assert_eq!(outcome.dropped[1], (2, "excluded-key:barrier".into()));
    }

    #[test]
    fn source_filter_idempotent() {
        let lines = [
            feature_line(1, r#"{"boundary": "administrative"}"#),
            feature_line(3, r#"{"landuse": "farmland"}"#),
        ]
        .join("\n");
        let (records, _) = parse_all(lines.as_bytes()).unwrap();
        let once = source_filter(records);
        let twice = source_filter(once.kept.clone());
        assert_eq!(once.kept, twice.kept);
        assert!(twice.dropped.is_empty());
    }

    #[test]
    fn empty_store_queries_empty() {
        let store = FeatureStore::build(Vec::new(), "digest").unwrap();
        assert!(store.is_empty());
        let world = GeoBBox::new(
            MercatorPoint { x: -1e7, y: -1e7 },
            MercatorPoint { x: 1e7, y: 1e7 },
        )
        .unwrap();
        assert!(store.query_bbox(&world).is_empty());
    }

    #[test]
    fn store_rejects_duplicate_ids() {
        let lines = [
            feature_line(7, r#"{"a": "1"}"#),
            feature_line(7, r#"{"b": "2"}"#),
        ]
        .join("\n");
        let (records, _) = parse_all(lines.as_bytes()).unwrap();
        let err = FeatureStore::build(records, "d").unwrap_err();
        let msg = err.to_string();
        assert_eq!(msg.matches('7').count(), 2, "{msg}");
    }

    #[test]
    fn store_retrieves_by_id() {
        let lines: String = (0..10)
            .map(|i| feature_line(i, r#"{"a": "b"}"#) + "\n")
            .collect();
        let (records, _) = parse_all(lines.as_bytes()).unwrap();
        let store = FeatureStore::build(records, "d").unwrap();
        assert_eq!(store.len(), 10);
        for i in 0..10 {
            assert!(store.get(i).is_some());
        }
    }

    fn random_square_line(rng: &mut ChaCha8Rng, id: i64) -> String {
        let lon = rng.gen_range(-1.0..1.0);
        let lat = rng.gen_range(-1.0..1.0);
        let d = rng.gen_range(0.001..0.05);
        format!(
            r#"{{"id": {id}, "geometry": {{"type": "Polygon", "coordinates": [[[{a}, {b}], [{c}, {b}], [{c}, {d2}], [{a}, {d2}], [{a}, {b}]]]}}, "tags": {{"k": "v"}}}}"#,
            a = lon,
            b = lat,
            c = lon + d,
            d2 = lat + d,
        )
    }

    #[test]
    fn query_bbox_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let lines: String = (0..200)
            .map(|i| random_square_line(&mut rng, i) + "\n")
            .collect();
        let (records, diags) = parse_all(lines.as_bytes()).unwrap();
        assert!(diags.is_empty());
        let store = FeatureStore::build(records, "d").unwrap();

        for _ in 0..50 {
            let x = rng.gen_range(-150_000.0..100_000.0);
            let y = rng.gen_range(-150_000.0..100_000.0);
            let q = GeoBBox::new(
                MercatorPoint { x, y },
                MercatorPoint {
                    x: x + rng.gen_range(100.0..80_000.0),
                    y: y + rng.gen_range(100.0..80_000.0),
                },
            )
            .unwrap();
            let got: Vec<i64> = store.query_bbox(&q).iter().map(|r| r.id).collect();
            let mut expect: Vec<i64> = store
                .ids()
                .filter(|id| store.projected_bbox(*id).unwrap().intersects(&q))
                .collect();
            expect.sort_unstable();
            assert_eq!(got, expect);
            // Ascending order is part of the contract.
            assert!(got.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
