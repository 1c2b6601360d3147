/// Integer label image, row-major; `0` is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), height * width, "label buffer does not match {height}x{width}");
        Self { height, width, labels }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l > 0).collect()
    }

    /// Pixel count per label, index 0 is background.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.max_label() as usize + 1];
        for &l in &self.labels {
            a[l as usize] += 1;
        }
        a
    }

    /// Renumbers labels to `1..=k` in order of first appearance of each
    /// surviving label value, keeping background at 0.
    pub fn relabel_contiguous(&mut self) {
        let mut map = vec![0u32; self.max_label() as usize + 1];
        let mut next = 0;
        for l in self.labels.iter_mut() {
            if *l == 0 {
                continue;
            }
            if map[*l as usize] == 0 {
                next += 1;
                map[*l as usize] = next;
            }
            *l = map[*l as usize];
        }
    }
}

/// 8-connected components of `mask` (row-major), labelled in raster order
/// of their first pixel. Components smaller than `min_size` are dropped and
/// the survivors renumbered contiguously.
pub fn connected_components(mask: &[bool], height: usize, width: usize, min_size: usize) -> LabelMap {
    assert_eq!(mask.len(), height * width);
    let mut out = LabelMap::zeros(height, width);
    let mut next = 0u32;
    let mut stack = Vec::new();
    let mut sizes = vec![0usize];
    for start in 0..mask.len() {
        if !mask[start] || out.labels[start] != 0 {
            continue;
        }
        next += 1;
        out.labels[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = ((i / width) as isize, (i % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && out.labels[j] == 0 {
                        out.labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    if min_size > 1 {
        for l in out.labels.iter_mut() {
            if sizes[*l as usize] < min_size {
                *l = 0;
            }
        }
        out.relabel_contiguous();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_join() {
        let m = [true, false, false, true];
        let cc = connected_components(&m, 2, 2, 1);
        assert_eq!(cc.labels, vec![1, 0, 0, 1]);
    }

    #[test]
    fn small_components_are_dropped() {
        #[rustfmt::skip]
        let m = [
            true, false, false, false,
            false, false, true, true,
            false, false, true, true,
            false, false, false, false,
        ];
        let cc = connected_components(&m, 4, 4, 4);
        assert_eq!(cc.max_label(), 1);
        assert_eq!(cc.areas(), vec![12, 4]);
    }
}
