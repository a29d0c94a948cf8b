//! Greedy frame-to-frame association of detections into tracks.

use serde::Serialize;

use crate::detector::{iou, BBox};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Track {
    /// (frame index, box), in frame order.
    pub boxes: Vec<(usize, BBox)>,
}

impl Track {
    fn last(&self) -> &(usize, BBox) {
        self.boxes.last().expect("tracks are never empty")
    }
}

/// Links per-frame detections into tracks. At every frame the (live track, detection) pairs of
/// equal label with IoU at least `iou_thr` are assigned greedily by descending IoU; leftover
/// detections start new tracks. A track that misses more than `max_gap` consecutive frames is
/// closed. Tracks are returned in order of their first frame.
pub fn link_tracks(frames: &[Vec<BBox>], iou_thr: f64, max_gap: usize) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    let mut live: Vec<usize> = Vec::new();
    for (t, dets) in frames.iter().enumerate() {
        live.retain(|&k| t - tracks[k].last().0 - 1 <= max_gap);
        let mut pairs = Vec::new();
        for (li, &k) in live.iter().enumerate() {
            let prev = &tracks[k].last().1;
            for (d, b) in dets.iter().enumerate() {
                let o = iou(prev, b);
                if b.label == prev.label && o >= iou_thr {
                    pairs.push((o, li, d));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut track_used = vec![false; live.len()];
        let mut det_used = vec![false; dets.len()];
        for (_, li, d) in pairs {
            if track_used[li] || det_used[d] {
                continue;
            }
            track_used[li] = true;
            det_used[d] = true;
            tracks[live[li]].boxes.push((t, dets[d]));
        }
        for (d, b) in dets.iter().enumerate() {
            if !det_used[d] {
                live.push(tracks.len());
                tracks.push(Track { boxes: vec![(t, *b)] });
            }
        }
    }
    tracks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64) -> BBox {
        BBox::new(x, 10.0, x + 20.0, 30.0)
    }

    #[test]
    fn high_overlap_chain_is_one_track() {
        let frames: Vec<Vec<BBox>> = (0..10).map(|t| vec![at(t as f64)]).collect();
        let tracks = link_tracks(&frames, 0.3, 0);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].boxes.len(), 10);
    }

    #[test]
    fn separated_objects_give_two_tracks() {
        let frames: Vec<Vec<BBox>> = (0..6).map(|t| vec![at(t as f64), at(80.0 - t as f64)]).collect();
        let tracks = link_tracks(&frames, 0.3, 1);
        assert_eq!(tracks.len(), 2);
        assert!(tracks.iter().all(|tr| tr.boxes.len() == 6));
    }

    #[test]
    fn short_gap_is_bridged_long_gap_is_not() {
        let mut frames: Vec<Vec<BBox>> = (0..6).map(|t| vec![at(t as f64)]).collect();
        frames[3].clear();
        let tracks = link_tracks(&frames, 0.3, 2);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].boxes.iter().map(|b| b.0).collect::<Vec<_>>(), vec![0, 1, 2, 4, 5]);

        frames[2].clear();
        frames[4].clear();
        assert_eq!(link_tracks(&frames, 0.3, 2).len(), 2);
    }
}
