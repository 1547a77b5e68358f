# modules/job_management.py
import json

import pandas as pd
import streamlit as st

from modules import genclient
from modules.errors import FactoryError
from modules.global_css import GLOBAL_CSS
from modules.storage_utils import delete_saved_data, get_saved_data_list, load_data_from_file, save_data_to_file

st.markdown(f"<style>{GLOBAL_CSS}</style>", unsafe_allow_html=True)


def status_frame(manifest):
    rows = []
    for job in manifest.jobs:
        entry = manifest.status[job.job_id]
        rows.append({
            "job_id": job.job_id,
            "ablation": job.ablation,
            "seed": job.seed,
            "state": entry["state"],
            "reason": entry.get("reason") or "",
            "attempts": entry.get("attempts", 0),
        })
    return pd.DataFrame(rows, columns=["job_id", "ablation", "seed", "state", "reason", "attempts"])


def _build_section(workspace):
    st.subheader("Build a batch")
    if not workspace.has_annotations():
        st.info("Load a crop or tile annotation file on the Dataset page first")
        return

    cfg = workspace.config
    names = [c.name for c in genclient.AblationConfig]
    labels = {c.name: c.label for c in genclient.AblationConfig}
    default = [n for n in (c.name for c in cfg.ablation_configs()) if n in names]
    chosen = st.multiselect("Ablation configs", names, default=default, format_func=lambda n: f"{n}: {labels[n]}")
    col_dir, col_seeds = st.columns(2)
    with col_dir:
        image_dir = st.text_input("Control image directory", value=f"{cfg.paths.root}/{cfg.paths.crops}")
    with col_seeds:
        per_depth = st.number_input("Seeds per depth map", min_value=1, value=int(cfg.generation.seeds_per_depth))

    n_images = len(workspace.annotations.images)
    st.caption(f"{n_images} depth maps x {int(per_depth)} seeds x {len(chosen)} configs = "
               f"{n_images * int(per_depth) * len(chosen)} jobs")

    if st.button("Build manifest"):
        if not chosen:
            st.error("Select at least one config")
            return
        try:
            refs = genclient.depth_refs_from_coco(workspace.annotations, image_dir)
            workspace.manifest = genclient.build_depth_batch(
                refs, cfg.master_seed, [genclient.AblationConfig[n] for n in chosen],
                cfg.generation_settings(), cfg.service.endpoint, int(per_depth))
            st.success(f"Built {len(workspace.manifest.jobs)} jobs ({workspace.manifest.batch_id})")
        except FactoryError as e:
            st.error(str(e))


def _status_section(workspace):
    st.subheader("Status")
    uploaded = st.file_uploader("Open manifest", type=["json"], key="manifest_upload")
    if uploaded and st.button("Load manifest"):
        try:
            workspace.manifest = genclient.JobManifest.from_dict(json.loads(uploaded.getvalue()))
            st.success(f"Loaded {uploaded.name}")
        except (json.JSONDecodeError, KeyError, FactoryError) as e:
            st.error(f"Cannot load {uploaded.name}: {e}")

    if not workspace.has_manifest():
        st.info("No manifest in this workspace")
        return

    manifest = workspace.manifest
    counts = manifest.counts()
    cols = st.columns(4)
    for col, state in zip(cols, (genclient.PENDING, genclient.SUBMITTED, genclient.DONE, genclient.FAILED)):
        col.metric(state.title(), counts[state])

    frame = status_frame(manifest)
    state_filter = st.multiselect("Show states", sorted(frame["state"].unique()), key="state_filter")
    if state_filter:
        frame = frame[frame["state"].isin(state_filter)]
    st.dataframe(frame, use_container_width=True)

    col_reset, col_download = st.columns(2)
    with col_reset:
        if st.button("Reset failed jobs"):
            n = manifest.reset_for_resume()
            st.success(f"{n} jobs back to pending")
    with col_download:
        st.download_button("Download manifest", json.dumps(manifest.to_dict(), indent=2, sort_keys=True),
                           file_name=f"{manifest.batch_id}.json", mime="application/json")


def _saved_section(workspace):
    st.subheader("Saved manifests")
    col_save, col_load = st.columns(2)
    with col_save:
        name = st.text_input("Save as", value=workspace.name, key="manifest_save_name")
        if st.button("Save manifest", disabled=not workspace.has_manifest()):
            ok, result = save_data_to_file(workspace.manifest.to_dict(), "manifest", name)
            if ok:
                st.success(f"Saved to {result}")
            else:
                st.error(f"Save failed: {result}")
    with col_load:
        saved = get_saved_data_list("manifest")
        if not saved:
            st.info("No saved manifests")
            return
        choice = st.selectbox("Saved", range(len(saved)),
                              format_func=lambda i: f"{saved[i]['save_name']} ({saved[i]['modified']})",
                              key="manifest_choice")
        col_l, col_d = st.columns(2)
        with col_l:
            if st.button("Load saved"):
                data, info = load_data_from_file(saved[choice]["filepath"])
                if data is None:
                    st.error(info)
                else:
                    try:
                        workspace.manifest = genclient.JobManifest.from_dict(data)
                        st.success(f"Loaded manifest saved {info}")
                    except (KeyError, FactoryError) as e:
                        st.error(str(e))
        with col_d:
            if st.button("Delete saved"):
                ok, message = delete_saved_data(saved[choice]["filepath"])
                if ok:
                    st.success(message)
                    st.rerun()
                else:
                    st.error(message)


def show(workspace):
    st.header("Generation Jobs")
    if workspace is None:
        st.warning("Create a workspace first")
        return
    _build_section(workspace)
    st.divider()
    _status_section(workspace)
    st.divider()
    _saved_section(workspace)
