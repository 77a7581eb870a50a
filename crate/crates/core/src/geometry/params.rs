use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Parametric description of the symmetric multilevel trap.
///
/// All lengths are micrometres, angles are degrees. The JSON form uses these
/// field names verbatim; omitted fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrapParams {
    /// Inner rf face to rf face.
    pub slot_width: f64,
    /// Width of the rf rail cap visible from above.
    pub rf_rail_width: f64,
    pub electrode_gap: f64,
    pub metal_thickness: f64,
    /// Height of the metallized vertical rf face.
    pub oxide_thickness: f64,
    /// Axial width of one dc segment, excluding the gap.
    pub segment_width: f64,
    pub n_segments_per_side: usize,
    /// Lateral distance from the rf face to the inner dc electrode edge.
    pub dc_setback: f64,
    /// Axial length of the through-slot; all slot electrodes run this long.
    pub slot_length: f64,
    /// KOH sidewall angle of the substrate slot.
    pub bevel_angle: f64,
    pub include_substrate: bool,
    /// Lateral truncation of the outer ground planes, measured from the slot axis.
    pub chip_extent: f64,
    /// Lateral width of the dc electrodes left uncovered by the ground overlay.
    pub dc_exposed_width: f64,
    /// Dielectric between the dc layer and the ground overlay.
    pub ground_dielectric_thickness: f64,
    /// Thickness of the silicon wafer under the electrode stack.
    pub substrate_thickness: f64,
}

impl Default for TrapParams {
    fn default() -> Self {
        Self {
            slot_width: 125.0,
            rf_rail_width: 15.0,
            electrode_gap: 5.0,
            metal_thickness: 1.0,
            oxide_thickness: 20.0,
            segment_width: 60.0,
            n_segments_per_side: 10,
            dc_setback: 20.0,
            slot_length: 2000.0,
            bevel_angle: 54.74,
            include_substrate: true,
            chip_extent: 1500.0,
            dc_exposed_width: 100.0,
            ground_dielectric_thickness: 1.0,
            substrate_thickness: 500.0,
        }
    }
}

impl TrapParams {
    /// Parse from JSON and check every invariant.
    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let params: TrapParams =
            serde_json::from_str(text).map_err(|e| GeometryError::Parse(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn segment_pitch(&self) -> f64 {
        self.segment_width + self.electrode_gap
    }

    /// Half of the axial length covered by the segment array (gaps included).
    pub fn segmented_half_length(&self) -> f64 {
        0.5 * self.n_segments_per_side as f64 * self.segment_pitch()
    }

    /// Axial span `[start, end]` of segment `index` (0 is the most negative z).
    pub fn segment_span(&self, index: usize) -> (f64, f64) {
        let start = -self.segmented_half_length()
            + 0.5 * self.electrode_gap
            + index as f64 * self.segment_pitch();
        (start, start + self.segment_width)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let positive = [
            ("slot_width", self.slot_width),
            ("rf_rail_width", self.rf_rail_width),
            ("electrode_gap", self.electrode_gap),
            ("metal_thickness", self.metal_thickness),
            ("oxide_thickness", self.oxide_thickness),
            ("segment_width", self.segment_width),
            ("dc_setback", self.dc_setback),
            ("slot_length", self.slot_length),
            ("chip_extent", self.chip_extent),
            ("dc_exposed_width", self.dc_exposed_width),
            ("ground_dielectric_thickness", self.ground_dielectric_thickness),
            ("substrate_thickness", self.substrate_thickness),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(GeometryError::InvalidParam {
                    field,
                    reason: format!("must be a finite positive length, got {value}"),
                });
            }
        }
        if !(self.bevel_angle.is_finite() && self.bevel_angle > 0.0 && self.bevel_angle < 90.0) {
            return Err(GeometryError::InvalidParam {
                field: "bevel_angle",
                reason: format!("must lie in (0, 90) degrees, got {}", self.bevel_angle),
            });
        }
        if self.n_segments_per_side < 1 {
            return Err(GeometryError::InvalidParam {
                field: "n_segments_per_side",
                reason: "must be at least 1".into(),
            });
        }
        if self.dc_setback < self.rf_rail_width + self.electrode_gap {
            return Err(GeometryError::ParamConflict(format!(
                "dc_setback {} is smaller than rf_rail_width + electrode_gap = {}; \
                 the dc electrodes would overlap the rf rail",
                self.dc_setback,
                self.rf_rail_width + self.electrode_gap
            )));
        }
        let segmented = self.n_segments_per_side as f64 * self.segment_pitch();
        if self.slot_length < segmented {
            return Err(GeometryError::ParamConflict(format!(
                "slot_length {} is shorter than the segment array ({} segments x {} um pitch = {})",
                self.slot_length,
                self.n_segments_per_side,
                self.segment_pitch(),
                segmented
            )));
        }
        let ground_edge = 0.5 * self.slot_width
            + self.dc_setback
            + self.dc_exposed_width
            + self.electrode_gap;
        if self.chip_extent <= ground_edge {
            return Err(GeometryError::ParamConflict(format!(
                "chip_extent {} does not reach past the ground inner edge at {}",
                self.chip_extent, ground_edge
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrapParams::default().validate().unwrap();
    }

    #[test]
    fn json_uses_snake_case_fields_and_defaults() {
        let p = TrapParams::from_json(r#"{"slot_width": 200}"#).unwrap();
        assert_eq!(p.slot_width, 200.0);
        assert_eq!(p.segment_width, 60.0);
        let back: TrapParams = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn negative_length_names_the_field() {
        let err = TrapParams::from_json(r#"{"slot_width": -1}"#).unwrap_err();
        assert!(err.to_string().contains("slot_width"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(TrapParams::from_json(r#"{"slot_wdth": 100}"#).is_err());
    }

    #[test]
    fn small_setback_conflicts() {
        let p = TrapParams {
            dc_setback: 10.0,
            ..Default::default()
        };
        assert!(matches!(p.validate(), Err(GeometryError::ParamConflict(_))));
    }

    #[test]
    fn short_slot_conflicts() {
        let p = TrapParams {
            slot_length: 600.0,
            ..Default::default()
        };
        assert!(matches!(p.validate(), Err(GeometryError::ParamConflict(_))));
    }

    #[test]
    fn segment_spans_are_gapped_and_centered() {
        let p = TrapParams::default();
        let (a0, b0) = p.segment_span(0);
        let (a1, _) = p.segment_span(1);
        assert!((a1 - b0 - p.electrode_gap).abs() < 1e-12);
        let (_, b_last) = p.segment_span(p.n_segments_per_side - 1);
        assert!((a0 + b_last).abs() < 1e-9);
    }
}
