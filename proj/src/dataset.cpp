#include "refine3d/dataset.hpp"

#include "refine3d/binvox.hpp"
#include "refine3d/errors.hpp"
#include "refine3d/png_io.hpp"

namespace refine3d {

Dataset load_dataset(const std::filesystem::path& root) {
    const DatasetManifest manifest = load_manifest(root);
    Dataset ds;
    ds.image_size = manifest.params.image_size;
    ds.voxel_dim = manifest.params.voxel_dim;

    for (const ManifestSample& ms : manifest.samples) {
        Sample s;
        s.category = ms.category;
        s.id = ms.id;
        s.seed = ms.seed;
        if (ms.split == "train")
            s.split = Split::train;
        else if (ms.split == "val")
            s.split = Split::val;
        else if (ms.split == "test")
            s.split = Split::test;
        else
            throw FormatError("dataset: unknown split '" + ms.split + "' for sample " + ms.id);

        s.gt = read_binvox(root / ms.gt);
        if (s.gt.dim != ds.voxel_dim)
            throw FormatError("dataset: ground truth " + ms.gt + " has extent " +
                              std::to_string(s.gt.dim) + ", manifest says " +
                              std::to_string(ds.voxel_dim));
        for (const ManifestView& mv : ms.views) {
            Image img = read_png(root / mv.file);
            if (img.width != ds.image_size || img.height != ds.image_size)
                throw FormatError("dataset: view " + mv.file + " is " +
                                  std::to_string(img.width) + "x" + std::to_string(img.height) +
                                  ", manifest says " + std::to_string(ds.image_size));
            s.views.push_back(image_to_tensor<float>(img));
        }
        if (s.views.empty()) throw FormatError("dataset: sample " + ms.id + " has no views");

        const size_t index = ds.samples.size();
        switch (s.split) {
            case Split::train:
                ds.train_indices.push_back(index);
                ds.train_by_category[s.category].push_back(index);
                break;
            case Split::val: ds.val_indices.push_back(index); break;
            case Split::test: ds.test_indices.push_back(index); break;
        }
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw FormatError("dataset: manifest lists no samples");
    return ds;
}

}  // namespace refine3d
