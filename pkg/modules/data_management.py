# modules/data_management.py
import json

import matplotlib.pyplot as plt
import pandas as pd
import streamlit as st

from modules.annotate import AnnotationSet, dataset_stats, instances_per_image
from modules.errors import FactoryError
from modules.global_css import GLOBAL_CSS

st.markdown(f"<style>{GLOBAL_CSS}</style>", unsafe_allow_html=True)


def _load_annotations(workspace):
    col_import, col_path = st.columns(2)
    with col_import:
        st.markdown("**Import COCO file**")
        uploaded = st.file_uploader("COCO annotations", type=["json"], key="coco_upload")
        if uploaded and st.button("Load upload"):
            try:
                aset = AnnotationSet.from_dict(json.loads(uploaded.getvalue()))
                aset.validate()
                workspace.annotations, workspace.annotations_source = aset, uploaded.name
                st.success(f"Loaded {len(aset.images)} images from {uploaded.name}")
            except (json.JSONDecodeError, KeyError, FactoryError) as e:
                st.error(f"Cannot load {uploaded.name}: {e}")

    with col_path:
        st.markdown("**Read from the output tree**")
        default = f"{workspace.config.paths.root}/annotations/full.json"
        path = st.text_input("Annotation file", value=default, key="coco_path")
        if st.button("Load file"):
            try:
                aset = AnnotationSet.load(path)
                aset.validate()
                workspace.annotations, workspace.annotations_source = aset, path
                st.success(f"Loaded {len(aset.images)} images from {path}")
            except (KeyError, FactoryError) as e:
                st.error(str(e))


def _histogram(values, bins, xlabel, title, reference=None):
    fig, ax = plt.subplots(figsize=(5, 3.3))
    ax.hist(values, bins=bins, color="#8c6d4f", alpha=0.85)
    if reference is not None:
        ax.axvline(reference, color="#1f77b4", linestyle="--", linewidth=1.5, label=f"reference {reference:g}")
        ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    return fig


def show(workspace):
    st.header("Dataset")
    if workspace is None:
        st.warning("Create a workspace first")
        return

    _load_annotations(workspace)
    st.divider()

    if not workspace.has_annotations():
        st.info("No annotation file loaded")
        return

    aset = workspace.annotations
    stats = dataset_stats(aset)
    st.subheader(f"Statistics: {workspace.annotations_source}")
    col1, col2, col3, col4 = st.columns(4)
    col1.metric("Images", stats["images"])
    col2.metric("Instances", stats["instances"])
    col3.metric("Mean per image", f"{stats['mean_instances_per_image']:.1f}",
                delta=f"{stats['deviation_from_reference']:+.1f} vs {stats['reference_mean']:g}")
    col4.metric("Median per image", f"{stats['median_instances_per_image']:.1f}")

    if not stats["instances"]:
        st.warning("The annotation file has no instances")
        return

    per_image = instances_per_image(aset)
    col_count, col_area = st.columns(2)
    with col_count:
        fig = _histogram(per_image["instances"], 20, "instances per image", "Instance count",
                         reference=stats["reference_mean"])
        st.pyplot(fig)
        plt.close(fig)
    with col_area:
        areas = pd.Series([a["area"] for a in aset.annotations])
        fig = _histogram(areas, 30, "mask area (px)", "Instance area")
        st.pyplot(fig)
        plt.close(fig)

    with st.expander("Per-image counts"):
        st.dataframe(per_image, use_container_width=True)
