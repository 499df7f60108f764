#include "vitc/model/config.hpp"

#include "vitc/errors.hpp"

namespace vitc {

void ViTConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("invalid ViT config: " + msg); };
    if (depth < 0) fail("depth must be >= 0");
    if (dim <= 0 || heads <= 0 || head_dim <= 0) fail("dim, heads and head_dim must be positive");
    if (dim != heads * head_dim) {
        fail("dim " + std::to_string(dim) + " != heads * head_dim (" + std::to_string(heads) + " * " +
             std::to_string(head_dim) + ")");
    }
    if (patch <= 0 || img <= 0) fail("patch and img must be positive");
    if (img % patch != 0) fail("img " + std::to_string(img) + " not divisible by patch " + std::to_string(patch));
    if (classes < 1) fail("classes must be >= 1");
    if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
}

ViTConfig ViTConfig::deit_tiny() {
    ViTConfig c;
    c.dim = 192;
    c.heads = 3;
    return c;
}

ViTConfig ViTConfig::deit_small() { return ViTConfig{}; }

ViTConfig ViTConfig::deit_base() {
    ViTConfig c;
    c.dim = 768;
    c.heads = 12;
    return c;
}

ViTConfig ViTConfig::desk() {
    ViTConfig c;
    c.depth = 4;
    c.dim = 64;
    c.heads = 4;
    c.head_dim = 16;
    c.patch = 4;
    c.img = 32;
    c.classes = 10;
    return c;
}

ViTConfig ViTConfig::by_name(std::string_view name) {
    if (name == "deit-tiny") return deit_tiny();
    if (name == "deit-small") return deit_small();
    if (name == "deit-base") return deit_base();
    if (name == "desk") return desk();
    throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

}  // namespace vitc
