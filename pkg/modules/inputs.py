# modules/inputs.py
import json
from dataclasses import replace

import streamlit as st

from modules.errors import FactoryError
from modules.global_css import GLOBAL_CSS
from modules.project_config import ProjectConfig
from modules.storage_utils import delete_saved_data, get_saved_data_list, load_data_from_file, save_data_to_file

st.markdown(f"<style>{GLOBAL_CSS}</style>", unsafe_allow_html=True)


def _quick_settings(cfg):
    """The handful of knobs most runs change, as widgets."""
    col_seed, col_count, col_dist = st.columns(3)
    with col_seed:
        master_seed = st.number_input("Master seed", min_value=0, value=int(cfg.master_seed), step=1)
    with col_count:
        count = st.number_input("Scene count", min_value=0, value=int(cfg.scenes.count), step=100)
    with col_dist:
        min_distance = st.number_input("Min. distance (m)", min_value=0.005, max_value=0.2,
                                       value=float(cfg.sampling.min_distance), step=0.001, format="%.3f")

    col_overlap, col_jobs, col_endpoint = st.columns(3)
    with col_overlap:
        overlap = st.slider("Tile overlap", 0.0, 0.9, float(cfg.tile.overlap), 0.05)
    with col_jobs:
        jobs = st.number_input("Worker processes", min_value=1, value=int(cfg.run.jobs), step=1)
    with col_endpoint:
        endpoint = st.text_input("Generation endpoint", cfg.service.endpoint)

    return replace(
        cfg,
        master_seed=int(master_seed),
        scenes=replace(cfg.scenes, count=int(count)),
        sampling=replace(cfg.sampling, min_distance=float(min_distance)),
        tile=replace(cfg.tile, overlap=float(overlap)),
        run=replace(cfg.run, jobs=int(jobs)),
        service=replace(cfg.service, endpoint=endpoint),
    )


def show(workspace):
    st.header("Project Settings")
    if workspace is None:
        st.warning("Create a workspace first")
        return

    st.subheader("Quick settings")
    try:
        updated = _quick_settings(workspace.config)
    except FactoryError as e:
        st.error(f"Invalid setting: {e}")
    else:
        if st.button("Apply quick settings"):
            workspace.config = updated
            st.success("Settings applied")

    st.divider()

    # ── Full config as JSON ──────────────────────────────────────────────────
    st.subheader("Full configuration")
    text = st.text_area("Config JSON", json.dumps(workspace.config.to_dict(), indent=2),
                        height=360, key=f"config_text_{workspace.name}")
    col_validate, col_download = st.columns(2)
    with col_validate:
        if st.button("Validate and apply"):
            try:
                workspace.config = ProjectConfig.from_dict(json.loads(text))
                st.success("Configuration is valid")
            except json.JSONDecodeError as e:
                st.error(f"Not valid JSON: {e}")
            except FactoryError as e:
                st.error(str(e))
    with col_download:
        st.download_button("Download config", json.dumps(workspace.config.to_dict(), indent=2),
                           file_name="project_config.json", mime="application/json")

    uploaded = st.file_uploader("Import config file", type=["json"], key="config_upload")
    if uploaded:
        try:
            workspace.config = ProjectConfig.from_dict(json.loads(uploaded.getvalue()))
            st.success(f"Loaded {uploaded.name}")
        except (json.JSONDecodeError, FactoryError) as e:
            st.error(f"Cannot load {uploaded.name}: {e}")

    st.divider()

    # ── Saved configs ────────────────────────────────────────────────────────
    st.subheader("Saved configurations")
    col_save, col_load = st.columns(2)
    with col_save:
        save_name = st.text_input("Save as", value=workspace.name, key="config_save_name")
        if st.button("Save configuration"):
            ok, result = save_data_to_file(workspace.config.to_dict(), "config", save_name)
            if ok:
                st.success(f"Saved to {result}")
            else:
                st.error(f"Save failed: {result}")

    with col_load:
        saved = get_saved_data_list("config")
        if not saved:
            st.info("No saved configurations")
            return
        labels = [f"{s['save_name']} ({s['modified']})" for s in saved]
        choice = st.selectbox("Saved", range(len(saved)), format_func=lambda i: labels[i])
        col_l, col_d = st.columns(2)
        with col_l:
            if st.button("Load"):
                data, info = load_data_from_file(saved[choice]["filepath"])
                if data is None:
                    st.error(info)
                else:
                    try:
                        workspace.config = ProjectConfig.from_dict(data)
                        st.success(f"Loaded configuration saved {info}")
                    except FactoryError as e:
                        st.error(str(e))
        with col_d:
            if st.button("Delete"):
                ok, message = delete_saved_data(saved[choice]["filepath"])
                if ok:
                    st.success(message)
                    st.rerun()
                else:
                    st.error(message)
