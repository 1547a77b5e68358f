# app.py
import streamlit as st

st.set_page_config(page_title="Mushroom Bed Dataset Factory", layout="wide")
from modules.global_css import GLOBAL_CSS
st.markdown(f"<style>{GLOBAL_CSS}</style>", unsafe_allow_html=True)

from modules.data_management import show as show_dataset
from modules.inputs import show as show_settings
from modules.job_management import show as show_jobs
from modules.project_config import ProjectConfig
from modules.results import show as show_evaluation


class Workspace:
    """Everything one dashboard session works on: a config plus loaded artifacts."""

    def __init__(self, name, config=None):
        self.name = name
        self.config = config or ProjectConfig()
        self.created_at = st.session_state.get("current_time", "Unknown")
        self.annotations = None  # AnnotationSet
        self.annotations_source = None
        self.manifest = None  # JobManifest
        self.report = None  # EvalReport
        self.distances = None  # DataFrame

    def has_annotations(self):
        return self.annotations is not None

    def has_manifest(self):
        return self.manifest is not None

    def has_report(self):
        return self.report is not None


def current_workspace():
    name = st.session_state.get("current_workspace")
    return st.session_state.workspaces.get(name) if name else None


def main():
    if "workspaces" not in st.session_state:
        st.session_state.workspaces = {"default": Workspace("default")}
    if "current_workspace" not in st.session_state:
        st.session_state.current_workspace = "default"
    if "current_tab" not in st.session_state:
        st.session_state.current_tab = "Project Settings"

    # ═══ SIDEBAR ═════════════════════════════════════════════════════════════
    st.sidebar.title("Mushroom Dataset Factory")
    st.sidebar.markdown("### Main Menu")
    for tab in ("Project Settings", "Dataset", "Generation Jobs", "Evaluation"):
        if st.sidebar.button(tab):
            st.session_state.current_tab = tab

    st.sidebar.markdown("---")
    names = list(st.session_state.workspaces.keys())
    selected = st.sidebar.selectbox("**Active Workspace:**", names,
                                    index=names.index(st.session_state.current_workspace),
                                    key="workspace_switcher")
    if selected != st.session_state.current_workspace:
        st.session_state.current_workspace = selected
        st.rerun()

    new_name = st.sidebar.text_input("New workspace", key="new_workspace_name")
    if st.sidebar.button("Create"):
        if not new_name.strip():
            st.sidebar.error("Enter a name")
        elif new_name in st.session_state.workspaces:
            st.sidebar.warning("Name taken")
        else:
            st.session_state.workspaces[new_name] = Workspace(new_name)
            st.session_state.current_workspace = new_name
            st.rerun()

    # ═══ RENDER PAGES ════════════════════════════════════════════════════════
    workspace = current_workspace()
    tab = st.session_state.current_tab
    if tab == "Project Settings":
        show_settings(workspace)
    elif tab == "Dataset":
        show_dataset(workspace)
    elif tab == "Generation Jobs":
        show_jobs(workspace)
    elif tab == "Evaluation":
        show_evaluation(workspace)


if __name__ == "__main__":
    main()
