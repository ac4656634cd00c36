# Bundled experiment configs, loaded through load_preset().
