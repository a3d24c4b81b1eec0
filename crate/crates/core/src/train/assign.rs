use super::data::Object;

/// Per-anchor training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Index into the object list for positive anchors.
    pub object: Vec<Option<usize>>,
    /// Class of the assigned object.
    pub class: Vec<Option<usize>>,
    /// ltrb distances from the anchor centre to the assigned box, in stride
    /// units. Zero for negatives.
    pub boxes: Vec<[f64; 4]>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.object.iter().filter(|o| o.is_some()).count()
    }

    pub fn is_positive(&self, anchor: usize) -> bool {
        self.object[anchor].is_some()
    }
}

fn contains(bbox: &[f64; 4], p: [f64; 2]) -> bool {
    bbox[0] <= p[0] && p[0] < bbox[2] && bbox[1] <= p[1] && p[1] < bbox[3]
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// An anchor is positive for the smallest box containing its centre (ties
/// go to the earlier object); every other anchor is negative.
pub fn assign_targets(centers: &[[f64; 2]], strides: &[usize], objects: &[Object]) -> Targets {
    let n = centers.len();
    let mut t = Targets {
        object: vec![None; n],
        class: vec![None; n],
        boxes: vec![[0.0; 4]; n],
    };
    for (a, (&c, &stride)) in centers.iter().zip(strides).enumerate() {
        let best = objects
            .iter()
            .enumerate()
            .filter(|(_, o)| contains(&o.bbox, c))
            .min_by(|x, y| area(&x.1.bbox).total_cmp(&area(&y.1.bbox)).then(x.0.cmp(&y.0)));
        if let Some((idx, o)) = best {
            let s = stride as f64;
            t.object[a] = Some(idx);
            t.class[a] = Some(o.class_id);
            t.boxes[a] = [
                (c[0] - o.bbox[0]) / s,
                (c[1] - o.bbox[1]) / s,
                (o.bbox[2] - c[0]) / s,
                (o.bbox[3] - c[1]) / s,
            ];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn obj(bbox: [f64; 4], class_id: usize) -> Object {
        Object { bbox, class_id }
    }

    #[test]
    fn whole_image_and_empty() {
        let (c, s) = ModelConfig::toy().anchors();
        let t = assign_targets(&c, &s, &[obj([0.0, 0.0, 64.0, 64.0], 2)]);
        assert_eq!(t.num_positive(), 84);
        assert!(t.class.iter().all(|&k| k == Some(2)));
        assert_eq!(t.boxes[0], [0.5, 0.5, 7.5, 7.5]);
        assert_eq!(assign_targets(&c, &s, &[]).num_positive(), 0);
    }

    #[test]
    fn nested_boxes_prefer_the_smaller() {
        let (c, s) = ModelConfig::toy().anchors();
        let outer = obj([0.0, 0.0, 40.0, 40.0], 0);
        let inner = obj([8.0, 8.0, 24.0, 24.0], 1);
        let t = assign_targets(&c, &s, &[outer, inner]);
        for (a, &p) in c.iter().enumerate() {
            let want = if contains(&inner.bbox, p) {
                Some(1)
            } else if contains(&outer.bbox, p) {
                Some(0)
            } else {
                None
            };
            assert_eq!(t.object[a], want);
        }
    }

    #[test]
    fn every_cell_sized_object_gets_an_anchor() {
        let (c, s) = ModelConfig::toy().anchors();
        for x in 0..56 {
            for y in [0usize, 13, 56] {
                let o = obj([x as f64, y as f64, x as f64 + 8.0, y as f64 + 8.0], 0);
                assert!(assign_targets(&c, &s, &[o]).num_positive() >= 1);
            }
        }
    }
}
